"""Differentiable layers over ``Tensor``.

Sequence tensors are laid out (batch, channels, length). The unbatched
(channels, length) form is accepted by the convolution and pooling ops and
returned unbatched.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from redkit.autodiff.tensor import Tensor, check_finite
from redkit.errors import InvalidArchitectureError, ShapeError


def _batched(x):
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, L) or (B, C, L), got {x.shape}")
    return x.data, False


def _maybe_squeeze(t, squeeze):
    if not squeeze:
        return t
    return reshape(t, t.shape[1:])


def reshape(x, shape):
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), op="reshape")


def flatten(x):
    """Flatten all axes after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def conv1d(x, w, b=None, stride=1):
    """Valid cross-correlation: y[o, t] = b[o] + sum_{c,k} w[o, c, k] x[c, s*t + k]."""
    xd, squeeze = _batched(x)
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be (C_out, C_in, K), got {w.shape}")
    n, c, length = xd.shape
    c_out, c_in, k = w.shape
    if c != c_in:
        raise ShapeError(f"conv1d: input has {c} channels, weight expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be ({c_out},), got {b.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if length < k:
        raise InvalidArchitectureError(f"conv1d: input length {length} < kernel {k}")
    l_out = (length - k) // stride + 1

    win = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * l_out, c * k)
    w2 = w.data.reshape(c_out, c * k)
    y = (cols @ w2.T).reshape(n, l_out, c_out).transpose(0, 2, 1)
    if b is not None:
        y = y + b.data[None, :, None]
    y = np.ascontiguousarray(y)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * l_out, c_out)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the padded gradient with the flipped kernel
                gp = np.zeros((n, c_out, l_out + 2 * (k - 1)), dtype=g.dtype)
                gp[:, :, k - 1:k - 1 + l_out] = g
                gwin = sliding_window_view(gp, k, axis=2)
                gcols = np.ascontiguousarray(gwin.transpose(0, 2, 1, 3)).reshape(
                    n * length, c_out * k)
                wf = np.ascontiguousarray(w.data[:, :, ::-1].transpose(0, 2, 1)).reshape(
                    c_out * k, c)
                dx = (gcols @ wf).reshape(n, length, c).transpose(0, 2, 1)
            else:
                dcols = (g2 @ w2).reshape(n, l_out, c, k).transpose(0, 2, 3, 1)
                dx = np.zeros_like(xd)
                span = stride * (l_out - 1) + 1
                for j in range(k):
                    dx[:, :, j:j + span:stride] += dcols[:, :, j, :]
            dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    out = Tensor.from_op(y, parents, backward, op="conv1d")
    return _maybe_squeeze(out, squeeze)


def conv1d_transpose(x, w, b=None, stride=1):
    """Adjoint of a stride-``stride`` conv1d; weight is (C_in, C_out, K).

    Output length is (L - 1) * stride + K.
    """
    xd, squeeze = _batched(x)
    if w.ndim != 3:
        raise ShapeError(f"conv1d_transpose weight must be (C_in, C_out, K), got {w.shape}")
    n, c, length = xd.shape
    c_in, c_out, k = w.shape
    if c != c_in:
        raise ShapeError(f"conv1d_transpose: input has {c} channels, weight expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d_transpose bias must be ({c_out},), got {b.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    l_out = (length - 1) * stride + k
    span = stride * (length - 1) + 1

    x2 = np.ascontiguousarray(xd.transpose(0, 2, 1)).reshape(n * length, c_in)
    w2 = w.data.reshape(c_in, c_out * k)
    cols = (x2 @ w2).reshape(n, length, c_out, k)
    y = np.zeros((n, c_out, l_out), dtype=np.result_type(xd, w.data))
    for j in range(k):
        y[:, :, j:j + span:stride] += cols[:, :, :, j].transpose(0, 2, 1)
    if b is not None:
        y += b.data[None, :, None]

    def backward(g):
        win = sliding_window_view(g, k, axis=2)[:, :, ::stride, :]  # (n, c_out, length, k)
        dcols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * length, c_out * k)
        dx = None
        if x.requires_grad:
            dx = (dcols @ w2.T).reshape(n, length, c_in).transpose(0, 2, 1)
            dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        dw = (x2.T @ dcols).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    out = Tensor.from_op(y, parents, backward, op="conv1d_transpose")
    return _maybe_squeeze(out, squeeze)


def maxpool1d(x, window=4, stride=4):
    """Max over windows along time; returns (output, argmax positions).

    A trailing remainder shorter than ``window`` is dropped and ties go to the
    first occurrence. Positions index the input time axis.
    """
    xd, squeeze = _batched(x)
    n, c, length = xd.shape
    if length < window:
        raise InvalidArchitectureError(f"maxpool1d: input length {length} < window {window}")
    l_out = (length - window) // stride + 1
    if stride == window:
        win = xd[:, :, :l_out * window].reshape(n, c, l_out, window)
    else:
        win = sliding_window_view(xd, window, axis=2)[:, :, ::stride, :]
    local = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    pos = local + stride * np.arange(l_out)[None, None, :]

    def backward(g):
        dx = np.zeros_like(xd)
        if stride >= window:
            np.put_along_axis(dx, pos, g, axis=2)
        else:
            bi, ci, _ = np.indices(pos.shape)
            np.add.at(dx, (bi, ci, pos), g)
        return (dx[0] if squeeze else dx,)

    out = Tensor.from_op(np.ascontiguousarray(y), (x,), backward, op="maxpool1d")
    return _maybe_squeeze(out, squeeze), (pos[0] if squeeze else pos)


def batchnorm1d(x, gamma, beta, training=True, running_mean=None, running_var=None,
                momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch and time of a (B, C, L) tensor.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays, updated in place) track them with the given
    momentum; the running variance uses the unbiased estimate. In eval mode
    the running statistics are used.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d expects (B, C, L), got {x.shape}")
    xd = x.data
    n_b, c, length = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm1d: gamma/beta must have one entry per channel")
    count = n_b * length
    g_ = gamma.data[None, :, None]

    if training:
        if count < 2:
            raise ShapeError("batchnorm1d in train mode needs batch*length >= 2")
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("batchnorm1d eval mode needs running statistics")
        mean = running_mean
        var = running_var
        centered = xd - mean[None, :, None]

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None]
    y = g_ * xhat + beta.data[None, :, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                s1 = dxhat.sum(axis=(0, 2))[None, :, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
                dx = (inv_std[None, :, None] / count) * (count * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta

    return Tensor.from_op(y.astype(xd.dtype, copy=False), (x, gamma, beta), backward,
                          op="batchnorm1d")


def dense(x, w, b=None):
    """y = x W^T + b for x of shape (B, N) and W of shape (M, N)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight width {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias must be ({w.shape[0]},), got {b.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def backward(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(y, parents, backward, op="dense")


def relu(x):
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), op="relu")


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    # keep the open interval (0, 1) even where the float rounds to 0 or 1
    fi = np.finfo(s.dtype)
    s = np.clip(s, fi.tiny, 1.0 - fi.epsneg)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),), op="sigmoid")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def crop_or_pad(x, length):
    """Center-crop or symmetrically zero-pad the last axis to ``length``."""
    cur = x.shape[-1]
    if cur == length:
        return x
    if cur > length:
        start = (cur - length) // 2
        sl = slice(start, start + length)
        y = x.data[..., sl]

        def backward(g):
            dx = np.zeros_like(x.data)
            dx[..., sl] = g
            return (dx,)
    else:
        left = (length - cur) // 2
        sl = slice(left, left + cur)
        y = np.zeros(x.shape[:-1] + (length,), dtype=x.dtype)
        y[..., sl] = x.data

        def backward(g):
            return (np.ascontiguousarray(g[..., sl]),)

    return Tensor.from_op(np.ascontiguousarray(y), (x,), backward, op="crop_or_pad")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, K), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sum_ez = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = np.mean(np.log(sum_ez[:, 0]) - z[rows, labels])
    probs = ez / sum_ez

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward,
                          op="softmax_cross_entropy")


def mse_loss(pred, target):
    """Mean squared error over all elements; ``target`` may be a plain array."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return Tensor.from_op(loss, (pred, target), backward, op="mse_loss")


__all__ = [
    "activation", "batchnorm1d", "check_finite", "conv1d", "conv1d_transpose",
    "crop_or_pad", "dense", "flatten", "maxpool1d", "mse_loss", "relu", "reshape",
    "sigmoid", "softmax_cross_entropy",
]
