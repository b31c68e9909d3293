"""Joint training of the denoising autoencoder, classifier and class centers.

Each mini-batch is noise-perturbed, pushed through the encoder, and the
flattened encoding feeds both the decoder and the classifier. The network
minimizes a weighted sum of cross-entropy, reconstruction MSE against the
clean batch, and center loss. The centers have their own Adam optimizer
driven by the center loss alone.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from redkit.autodiff import functional as F
from redkit.autodiff.optim import Adam, AdamState, adam_step
from redkit.autodiff.tensor import Tensor
from redkit.errors import ConfigError, FormatError, NonFiniteError, ShapeError
from redkit.model import RedModel, decode_weights, encode_weights
from redkit.signal_sim import child_seed, perturb_batch

_TRAIN_STREAM = 11


@dataclass
class TrainConfig:
    max_epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    lr_ml: float = 0.5
    lambda_ce: float = 1.0
    lambda_mse: float = 0.5
    lambda_ml: float = 0.005
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    train_snr_db: object = (0.0, 30.0)   # fixed dB value or (low, high) drawn per record
    seed: int = 0
    freeze_centers: bool = False

    def __post_init__(self):
        if isinstance(self.train_snr_db, list):
            self.train_snr_db = tuple(self.train_snr_db)
        self.validate()

    def validate(self):
        for name in ("lambda_ce", "lambda_mse", "lambda_ml"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_ml <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")


@dataclass
class CenterBank:
    centers: np.ndarray
    state: AdamState = None

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like(self.centers)

    @classmethod
    def zeros(cls, n_classes, dim, dtype=np.float32):
        return cls(np.zeros((n_classes, dim), dtype=dtype))

    @property
    def n_classes(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    def step(self, grad, lr):
        self.centers, self.state = adam_step(self.centers, grad, self.state, lr)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def append(self, **entry):
        self.epochs.append(entry)

    def to_jsonl(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch, batch, cause):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its metric is below ``best * (1 - threshold)``.
    The bad-epoch counter resets after each reduction.
    """

    def __init__(self, lr, patience=10, factor=0.1, threshold=1e-4):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if math.isinf(self.best) or metric < self.best - self.threshold * abs(self.best):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return self.lr


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return labels


def center_loss(z, labels, centers):
    """Half the batch mean of ||z_i - c_{y_i}||^2.

    ``centers`` is a Tensor, array or ``CenterBank`` of shape (K, t);
    gradient reaches ``z`` and, for a Tensor that requires it, the rows of
    the centers that were used.
    """
    if isinstance(centers, CenterBank):
        centers = centers.centers
    if not isinstance(centers, Tensor):
        centers = Tensor(np.asarray(centers, dtype=z.dtype))
    if z.ndim != 2 or centers.ndim != 2 or z.shape[1] != centers.shape[1]:
        raise ShapeError(f"center_loss: features {z.shape} vs centers {centers.shape}")
    labels = _check_labels(labels, centers.shape[0])
    n = z.shape[0]
    diff = z.data - centers.data[labels]
    loss = np.asarray(0.5 * np.sum(diff * diff) / n, dtype=z.dtype)

    def backward(g):
        dz = diff * (g / n)
        dc = None
        if centers.requires_grad:
            dc = np.zeros_like(centers.data)
            np.add.at(dc, labels, -dz)
        return dz, dc

    return Tensor.from_op(loss, (z, centers), backward, op="center_loss")


def center_grad(z, labels, centers):
    """Gradient of the center loss with respect to the centers array."""
    n = z.shape[0]
    diff = z - centers[labels]
    g = np.zeros_like(centers)
    np.add.at(g, labels, -diff / n)
    return g


def reconstruction_loss(x_clean, x_hat):
    """Mean squared error between the clean target and the reconstruction."""
    return F.mse_loss(x_hat, x_clean)


def composite_loss(ce, mse, ml, config):
    """lambda_ce*ce + lambda_ml*ml + lambda_mse*mse.

    Components may be Tensors, floats or ``None`` (skipped); the result is a
    Tensor when any component is one.
    """
    total = None
    for name, value, weight in (("ce", ce, config.lambda_ce), ("ml", ml, config.lambda_ml),
                                ("mse", mse, config.lambda_mse)):
        if value is None:
            continue
        raw = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(raw):
            raise NonFiniteError(f"{name} loss is not finite ({raw})")
        if weight == 0:
            continue
        term = value * weight
        total = term if total is None else total + term
    return 0.0 if total is None else total


def ablate(config, drop):
    """Copy of ``config`` with the named loss weights (``CE``/``MSE``/``ML``) set to 0."""
    names = {drop} if isinstance(drop, str) else set(drop)
    keys = {"CE": "lambda_ce", "MSE": "lambda_mse", "ML": "lambda_ml"}
    names = {n.upper() for n in names}
    bad = names - set(keys)
    if bad:
        raise ConfigError(f"unknown loss component(s) {sorted(bad)}")
    if len(names) >= 3:
        raise ConfigError("cannot drop all three loss components")
    return replace(config, **{keys[n]: 0.0 for n in names})


def forward_losses(model, x_in, x_clean, labels, centers, config, training):
    """Loss components for one batch; skipped components are ``None``.

    Returns ``(ce, mse, ml, z)`` where ``z`` is the semantic feature Tensor.
    """
    enc = model.encode(x_in, training=training)
    z = enc
    ce = mse = ml = None
    hidden = None
    if config.lambda_ce > 0 or model.arch.latent == "hidden":
        hidden = model.hidden(enc)
        if model.arch.latent == "hidden":
            z = hidden
    if config.lambda_ce > 0:
        ce = F.softmax_cross_entropy(model.logits_from_hidden(hidden), labels)
    if config.lambda_mse > 0:
        mse = reconstruction_loss(x_clean, model.decode(enc, training=training))
    if config.lambda_ml > 0:
        ml = center_loss(z, labels, centers)
    return ce, mse, ml, z


def evaluate(model, x, labels, centers, config, batch_size=256):
    """Noise-free eval-mode loss components averaged over ``x``."""
    sums = {"ce": 0.0, "mse": 0.0, "ml": 0.0}
    n = len(x)
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        yb = labels[start:start + batch_size]
        ce, mse, ml, _ = forward_losses(model, xb, xb, yb, centers, config, training=False)
        for key, v in (("ce", ce), ("mse", mse), ("ml", ml)):
            if v is not None:
                sums[key] += v.item() * len(xb)
    out = {k: v / n for k, v in sums.items()}
    out["total"] = float(composite_loss(out["ce"], out["mse"], out["ml"], config))
    return out


def train(model, dataset, config, checkpoint_path=None, log_path=None, verbose=False):
    """Train ``model`` in place on the dataset's train split.

    Returns ``(model, bank, log)`` with the model and centers restored to the
    epoch of lowest validation loss.
    """
    config.validate()
    n_known = dataset.n_known
    if model.arch.n_classes != n_known:
        raise ConfigError(f"model has {model.arch.n_classes} outputs, dataset has {n_known} "
                          "known classes")
    x_tr, y_tr = dataset.select("train")
    x_va, y_va = dataset.select("val")
    for name, y in (("train", y_tr), ("val", y_va)):
        if np.any(y >= n_known) or np.any(y < 0):
            raise ConfigError(f"{name} split contains rogue or invalid labels")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("training needs non-empty train and val splits")
    x_tr = x_tr.astype(model.dtype, copy=False)
    x_va = x_va.astype(model.dtype, copy=False)

    bank = CenterBank.zeros(n_known, model.arch.feature_dim, dtype=model.dtype)
    opt = Adam(model.parameters(), lr=config.lr)
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor,
                             config.plateau_threshold)
    rng = np.random.default_rng(child_seed(config.seed, _TRAIN_STREAM))
    update_centers = config.lambda_ml > 0 and not config.freeze_centers
    log = TrainLog()
    best = (math.inf, None, None, 0)
    n = len(x_tr)

    for epoch in range(1, config.max_epochs + 1):
        opt.lr = sched.lr
        perm = rng.permutation(n)
        sums = {"ce": 0.0, "mse": 0.0, "ml": 0.0, "total": 0.0}
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs two samples
            xb, yb = x_tr[idx], y_tr[idx]
            seeds = rng.integers(0, 2 ** 63, size=len(idx))
            xn = perturb_batch(xb, config.train_snr_db, seeds)
            try:
                ce, mse, ml, z = forward_losses(model, xn, xb, yb, bank.centers, config,
                                                training=True)
                total = composite_loss(ce, mse, ml, config)
                opt.zero_grad()
                total.backward()
                opt.step()
                if update_centers:
                    bank.step(center_grad(z.data, yb, bank.centers), config.lr_ml)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, exc) from exc
            for key, v in (("ce", ce), ("mse", mse), ("ml", ml), ("total", total)):
                if v is not None:
                    sums[key] += v.item() * len(idx)
        val = evaluate(model, x_va, y_va, bank.centers, config)
        entry = {"epoch": epoch, "lr": opt.lr, **{k: v / n for k, v in sums.items()},
                 "val_total": val["total"]}
        log.append(**entry)
        if verbose:
            print(json.dumps(entry), flush=True)
        if val["total"] < best[0]:
            best = (val["total"], model.state_dict(), bank.centers.copy(), epoch)
        sched.step(val["total"])

    model.load_state_dict(best[1])
    bank.centers = best[2]
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, bank)
        log.checkpoints.append({"path": str(checkpoint_path), "epoch": best[3]})
    if log_path is not None:
        Path(log_path).write_text(log.to_jsonl())
    return model, bank, log


_BANK_MAGIC = b"CBNK"


def save_checkpoint(path, model, bank):
    centers = np.ascontiguousarray(bank.centers, dtype="<f4")
    section = _BANK_MAGIC + struct.pack("<II", *centers.shape) + centers.tobytes()
    Path(path).write_bytes(encode_weights(model) + section)


def load_checkpoint(path):
    """Returns ``(model, bank)``."""
    raw = Path(path).read_bytes()
    model, pos = decode_weights(raw)
    if raw[pos:pos + 4] != _BANK_MAGIC:
        raise FormatError("checkpoint lacks a center-bank section")
    k, t = struct.unpack_from("<II", raw, pos + 4)
    centers = np.frombuffer(raw, dtype="<f4", count=k * t, offset=pos + 12).reshape(k, t).copy()
    return model, CenterBank(centers)


def config_dict(config):
    d = asdict(config)
    if isinstance(d["train_snr_db"], tuple):
        d["train_snr_db"] = list(d["train_snr_db"])
    return d
