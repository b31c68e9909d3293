"""Finite-difference gradient battery over every layer and loss of the network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from redkit.autodiff import functional as F
from redkit.autodiff.gradcheck import check_gradients
from redkit.autodiff.tensor import Tensor
from redkit.trainer import center_loss

TOLERANCE = 1e-4
STEP = 1e-5


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape, gap=1e-2):
    """Values whose pairwise gaps exceed ``gap`` so argmax is stable under the FD step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4, size=n)).reshape(shape)


def _conv(rng):
    b, c, o, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    stride = int(rng.integers(1, 3))
    length = int(k + stride * rng.integers(1, 5))
    args = [_leaf(rng.standard_normal((b, c, length))), _leaf(rng.standard_normal((o, c, k))),
            _leaf(rng.standard_normal(o))]
    return (lambda x, w, bb: F.conv1d(x, w, bb, stride=stride)), args


def _conv_t(rng):
    b, c, o, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    stride = int(rng.integers(1, 5))
    length = int(rng.integers(1, 6))
    args = [_leaf(rng.standard_normal((b, c, length))), _leaf(rng.standard_normal((c, o, k))),
            _leaf(rng.standard_normal(o))]
    return (lambda x, w, bb: F.conv1d_transpose(x, w, bb, stride=stride)), args


def _pool(rng):
    b, c = rng.integers(1, 3), rng.integers(1, 4)
    length = int(rng.integers(4, 14))
    return (lambda x: F.maxpool1d(x, 4, 4)[0]), [_leaf(_distinct(rng, (b, c, length)))]


def _bn_train(rng):
    b, c, length = rng.integers(2, 4), rng.integers(1, 4), rng.integers(2, 6)
    args = [_leaf(rng.standard_normal((b, c, length))), _leaf(rng.uniform(0.5, 1.5, c)),
            _leaf(rng.standard_normal(c))]
    return (lambda x, g, bb: F.batchnorm1d(x, g, bb, training=True)), args


def _bn_eval(rng):
    b, c, length = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 6)
    mean = rng.standard_normal(c)
    var = rng.uniform(0.5, 2.0, c)
    args = [_leaf(rng.standard_normal((b, c, length))), _leaf(rng.uniform(0.5, 1.5, c)),
            _leaf(rng.standard_normal(c))]
    return (lambda x, g, bb: F.batchnorm1d(x, g, bb, training=False, running_mean=mean,
                                           running_var=var)), args


def _dense(rng):
    b, n, m = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    args = [_leaf(rng.standard_normal((b, n))), _leaf(rng.standard_normal((m, n))),
            _leaf(rng.standard_normal(m))]
    return F.dense, args


def _relu(rng):
    return F.relu, [_leaf(_away_from_zero(rng, (3, 5)))]


def _sigmoid(rng):
    return F.sigmoid, [_leaf(rng.standard_normal((3, 5)) * 3)]


def _crop_pad(rng):
    length = int(rng.integers(2, 9))
    target = int(rng.integers(1, 12))
    return (lambda x: F.crop_or_pad(x, target)), [_leaf(rng.standard_normal((2, 3, length)))]


def _cross_entropy(rng):
    b, k = rng.integers(1, 5), rng.integers(2, 6)
    labels = rng.integers(0, k, size=b)
    return (lambda z: F.softmax_cross_entropy(z, labels)), [_leaf(rng.standard_normal((b, k)) * 2)]


def _mse(rng):
    shape = (2, 2, int(rng.integers(1, 6)))
    return F.mse_loss, [_leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(shape))]


def _center(rng):
    b, k, t = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 5)
    labels = rng.integers(0, k, size=b)
    args = [_leaf(rng.standard_normal((b, t))), _leaf(rng.standard_normal((k, t)))]
    return (lambda z, c: center_loss(z, labels, c)), args


CASES = {
    "conv1d": _conv,
    "conv1d_transpose": _conv_t,
    "maxpool1d": _pool,
    "batchnorm1d[train]": _bn_train,
    "batchnorm1d[eval]": _bn_eval,
    "dense": _dense,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "crop_or_pad": _crop_pad,
    "softmax_cross_entropy": _cross_entropy,
    "reconstruction_mse": _mse,
    "center_loss": _center,
}


@dataclass
class BatteryResult:
    name: str
    worst_error: float
    instances: int

    @property
    def passed(self):
        return self.worst_error < TOLERANCE


def run_battery(instances=20, seed=0, h=STEP):
    """Worst relative gradient error per case over ``instances`` random draws (64-bit)."""
    results = []
    for i, (name, make) in enumerate(CASES.items()):
        worst = 0.0
        for j in range(instances):
            rng = np.random.default_rng([seed, i, j])
            fn, args = make(rng)
            worst = max(worst, check_gradients(fn, args, h=h, seed=j))
        results.append(BatteryResult(name, worst, instances))
    return results


def main(instances=20, seed=0, out=print):
    start = time.perf_counter()
    results = run_battery(instances, seed)
    for r in results:
        out(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} worst rel. error {r.worst_error:.2e}")
    out(f"{len(results)} cases, {instances} instances each, {time.perf_counter() - start:.1f} s")
    return all(r.passed for r in results)
