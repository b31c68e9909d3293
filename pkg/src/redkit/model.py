"""Encoder / decoder / classifier network.

Encoder: ``depth`` blocks of Conv(k) -> ReLU -> BatchNorm -> MaxPool.
Decoder: ``depth`` blocks of ConvTranspose(stride = pool window) -> ReLU ->
BatchNorm, a length adjustment, then Conv -> Sigmoid back to 2 x L.
Classifier: Dense(hidden) -> ReLU -> Dense(n_classes) on the flattened
encoder output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from redkit.autodiff import functional as F
from redkit.autodiff.tensor import Tensor, parameter
from redkit.errors import ConfigError, FormatError, InvalidArchitectureError, ShapeError

IN_CHANNELS = 2


def encoder_lengths(length, depth, kernel=10, window=4):
    """Temporal length after each conv and pool of the encoder.

    Returns a list of ``(after_conv, after_pool)`` pairs. Raises
    ``InvalidArchitectureError`` naming the first stage that cannot run.
    """
    chain = []
    cur = length
    for stage in range(1, depth + 1):
        if cur < kernel:
            raise InvalidArchitectureError(
                f"encoder stage {stage}: length {cur} is shorter than conv kernel {kernel}",
                stage=stage)
        conv = cur - kernel + 1
        if conv < window:
            raise InvalidArchitectureError(
                f"encoder stage {stage}: length {conv} is shorter than pool window {window}",
                stage=stage)
        cur = conv // window
        chain.append((conv, cur))
    return chain


def max_feasible_depth(length, kernel=10, window=4):
    depth = 0
    while True:
        try:
            encoder_lengths(length, depth + 1, kernel, window)
        except InvalidArchitectureError:
            return depth
        depth += 1


@dataclass
class ArchitectureConfig:
    input_length: int
    n_classes: int
    encoder_depth: int | None = None
    conv_channels: int = 64
    conv_kernel: int = 10
    pool_window: int = 4
    decoder_kernel: int = 3
    classifier_hidden: int = 1024
    latent: str = "encoder"   # "encoder" or "hidden": which vector is the semantic feature

    def __post_init__(self):
        if self.encoder_depth is None:
            self.encoder_depth = max_feasible_depth(self.input_length, self.conv_kernel,
                                                    self.pool_window)
        self.validate()

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.latent not in ("encoder", "hidden"):
            raise ConfigError(f"latent must be 'encoder' or 'hidden', got {self.latent!r}")
        if self.encoder_depth < 1:
            raise InvalidArchitectureError(
                f"input length {self.input_length} admits no encoder stage", stage=1)
        encoder_lengths(self.input_length, self.encoder_depth, self.conv_kernel, self.pool_window)

    @property
    def latent_length(self):
        return encoder_lengths(self.input_length, self.encoder_depth, self.conv_kernel,
                               self.pool_window)[-1][1]

    @property
    def encoder_dim(self):
        return self.conv_channels * self.latent_length

    @property
    def feature_dim(self):
        """Dimension t of the semantic feature."""
        return self.encoder_dim if self.latent == "encoder" else self.classifier_hidden

    def decoder_lengths(self):
        """Lengths after each transposed conv, before the final length adjustment."""
        out = []
        cur = self.latent_length
        for _ in range(self.encoder_depth):
            cur = (cur - 1) * self.pool_window + self.decoder_kernel
            out.append(cur)
        return out

    def shape_chain(self):
        """Symbolic per-stage shapes for one record, without building anything."""
        c, k = self.conv_channels, self.decoder_kernel
        shapes = [("input", (IN_CHANNELS, self.input_length))]
        for i, (conv, pool) in enumerate(encoder_lengths(
                self.input_length, self.encoder_depth, self.conv_kernel, self.pool_window), 1):
            shapes.append((f"enc{i}.conv", (c, conv)))
            shapes.append((f"enc{i}.pool", (c, pool)))
        shapes.append(("latent", (self.encoder_dim,)))
        for i, length in enumerate(self.decoder_lengths(), 1):
            shapes.append((f"dec{i}.convT", (c, length)))
        shapes.append(("dec.adjust", (c, self.input_length + k - 1)))
        shapes.append(("dec.out", (IN_CHANNELS, self.input_length)))
        shapes.append(("cls.hidden", (self.classifier_hidden,)))
        shapes.append(("cls.logits", (self.n_classes,)))
        return shapes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(rng, size, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


class RedModel:
    """Parameter bundle plus forward passes. Parameters live in ``self.params``."""

    def __init__(self, arch, params, buffers, dtype=np.float32):
        self.arch = arch
        self.params = params      # name -> Tensor (trainable)
        self.buffers = buffers    # name -> ndarray (batchnorm running stats)
        self.dtype = np.dtype(dtype)

    @classmethod
    def build(cls, arch, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        c, k = arch.conv_channels, arch.conv_kernel
        dk = arch.decoder_kernel
        arrays, buffers = {}, {}

        in_ch = IN_CHANNELS
        for i in range(1, arch.encoder_depth + 1):
            fan = in_ch * k
            arrays[f"enc{i}.conv.w"] = _kaiming_uniform(rng, (c, in_ch, k), fan)
            arrays[f"enc{i}.conv.b"] = _bias(rng, c, fan)
            arrays[f"enc{i}.bn.gamma"] = np.ones(c)
            arrays[f"enc{i}.bn.beta"] = np.zeros(c)
            buffers[f"enc{i}.bn.mean"] = np.zeros(c)
            buffers[f"enc{i}.bn.var"] = np.ones(c)
            in_ch = c
        for i in range(1, arch.encoder_depth + 1):
            fan = c * dk
            arrays[f"dec{i}.convT.w"] = _kaiming_uniform(rng, (c, c, dk), fan)
            arrays[f"dec{i}.convT.b"] = _bias(rng, c, fan)
            arrays[f"dec{i}.bn.gamma"] = np.ones(c)
            arrays[f"dec{i}.bn.beta"] = np.zeros(c)
            buffers[f"dec{i}.bn.mean"] = np.zeros(c)
            buffers[f"dec{i}.bn.var"] = np.ones(c)
        fan = c * dk
        arrays["dec.out.w"] = _kaiming_uniform(rng, (IN_CHANNELS, c, dk), fan)
        arrays["dec.out.b"] = _bias(rng, IN_CHANNELS, fan)
        fan = arch.encoder_dim
        arrays["cls.fc1.w"] = _kaiming_uniform(rng, (arch.classifier_hidden, fan), fan)
        arrays["cls.fc1.b"] = _bias(rng, arch.classifier_hidden, fan)
        fan = arch.classifier_hidden
        arrays["cls.fc2.w"] = _kaiming_uniform(rng, (arch.n_classes, fan), fan)
        arrays["cls.fc2.b"] = _bias(rng, arch.n_classes, fan)

        params = {n: parameter(a.astype(dtype)) for n, a in arrays.items()}
        buffers = {n: b.astype(dtype) for n, b in buffers.items()}
        return cls(arch, params, buffers, dtype)

    # -- forward passes ---------------------------------------------------

    def _input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 2:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != IN_CHANNELS:
            raise ShapeError(f"expected (B, {IN_CHANNELS}, L) input, got {x.shape}")
        if x.shape[2] != self.arch.input_length:
            raise ShapeError(f"input length {x.shape[2]} != configured {self.arch.input_length}")
        return x

    def _bn(self, x, prefix, training):
        p = self.params
        return F.batchnorm1d(x, p[prefix + ".gamma"], p[prefix + ".beta"], training=training,
                             running_mean=self.buffers[prefix + ".mean"],
                             running_var=self.buffers[prefix + ".var"])

    def encode(self, x, training=False):
        """Flattened encoder output, shape (B, encoder_dim)."""
        h = self._input(x)
        p = self.params
        for i in range(1, self.arch.encoder_depth + 1):
            h = F.conv1d(h, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"])
            h = F.relu(h)
            h = self._bn(h, f"enc{i}.bn", training)
            h, _ = F.maxpool1d(h, self.arch.pool_window, self.arch.pool_window)
        return F.flatten(h)

    def decode(self, z, training=False):
        """Reconstruction in (0, 1), shape (B, 2, L), from flattened encoder output."""
        arch = self.arch
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim != 2 or z.shape[1] != arch.encoder_dim:
            raise ShapeError(f"decoder input must be (B, {arch.encoder_dim}), got {z.shape}")
        p = self.params
        h = F.reshape(z, (z.shape[0], arch.conv_channels, arch.latent_length))
        for i in range(1, arch.encoder_depth + 1):
            h = F.conv1d_transpose(h, p[f"dec{i}.convT.w"], p[f"dec{i}.convT.b"],
                                   stride=arch.pool_window)
            h = F.relu(h)
            h = self._bn(h, f"dec{i}.bn", training)
        h = F.crop_or_pad(h, arch.input_length + arch.decoder_kernel - 1)
        h = F.conv1d(h, p["dec.out.w"], p["dec.out.b"])
        return F.sigmoid(h)

    def hidden(self, z):
        arch = self.arch
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim != 2 or z.shape[1] != arch.encoder_dim:
            raise ShapeError(f"classifier input must be (B, {arch.encoder_dim}), got {z.shape}")
        return F.relu(F.dense(z, self.params["cls.fc1.w"], self.params["cls.fc1.b"]))

    def classify(self, z):
        """Raw logits (B, n_classes) from flattened encoder output."""
        return self.logits_from_hidden(self.hidden(z))

    def logits_from_hidden(self, h):
        return F.dense(h, self.params["cls.fc2.w"], self.params["cls.fc2.b"])

    def features(self, x, batch_size=256):
        """Semantic features (eval mode) as a plain array, shape (N, feature_dim)."""
        x = np.asarray(x)
        out = []
        for start in range(0, len(x), batch_size):
            z = self.encode(x[start:start + batch_size], training=False)
            if self.arch.latent == "hidden":
                z = self.hidden(z)
            out.append(z.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.arch.feature_dim))

    # -- state ------------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        state = {n: t.data.copy() for n, t in self.params.items()}
        state.update({n: b.copy() for n, b in self.buffers.items()})
        return state

    def load_state_dict(self, state):
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ShapeError(f"{n}: shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], dtype=self.dtype)
        for n in self.buffers:
            # in place: batchnorm updates these arrays directly
            self.buffers[n][...] = state[n]

    def save(self, path, extra_sections=b""):
        Path(path).write_bytes(encode_weights(self) + extra_sections)

    @classmethod
    def load(cls, path):
        model, _ = decode_weights(Path(path).read_bytes())
        return model


_WEIGHTS_MAGIC = b"REDW"
_WEIGHTS_VERSION = 1


def encode_weights(model):
    """Weights file bytes. Values are stored as little-endian float32."""
    cfg = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    state = model.state_dict()
    out = [_WEIGHTS_MAGIC, struct.pack("<II", _WEIGHTS_VERSION, len(cfg)), cfg,
           struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(raw, offset=0):
    """Parse a weights blob; returns ``(model, end_offset)``."""
    if raw[offset:offset + 4] != _WEIGHTS_MAGIC:
        raise FormatError("not a weights file (bad magic)")
    version, cfg_len = struct.unpack_from("<II", raw, offset + 4)
    if version != _WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    pos = offset + 12
    arch = ArchitectureConfig.from_dict(json.loads(raw[pos:pos + cfg_len]))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    model = RedModel.build(arch, seed=0, dtype=np.float32)
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise FormatError(f"weights file lacks {sorted(missing)}")
    model.load_state_dict(state)
    return model, pos
