"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build, inputs, h=1e-5, seed=0):
    """Compare autodiff and numerical gradients of a random projection of ``build``.

    ``build(*inputs)`` returns a Tensor. Each input is a leaf Tensor with
    ``requires_grad`` set; its ``.data`` is perturbed during the check. The
    output is reduced to a scalar by a fixed random weighting so every output
    element contributes. Returns the worst relative error over the inputs.
    """
    out = build(*inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)

    for t in inputs:
        t.grad = None
    out = build(*inputs)
    out.backward(proj.astype(out.dtype))
    analytic = [t.grad.copy() for t in inputs]

    def scalar():
        return float(np.sum(build(*inputs).data * proj))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        num = numerical_grad(scalar, t.data, h=h)
        worst = max(worst, relative_error(a, num))
    return worst
