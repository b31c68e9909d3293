"""Synthetic IQ fingerprint datasets.

Each emitter transmits random QPSK bursts through its own analog front-end
impairments and its own multipath channel; the receiver adds white noise.
Records are stored as 2 x L real arrays (I, Q) after min-max normalization.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from redkit.errors import ConfigError, FormatError

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}

SAMPLES_PER_SYMBOL = 8
RRC_ROLLOFF = 0.35
RRC_SPAN = 8  # symbols

# seed-derivation stream tags
_PROFILE_STREAM = 1
_CHANNEL_STREAM = 2
_RECORD_STREAM = 3
_SPLIT_STREAM = 4


def child_seed(master, *path):
    """Integer seed derived from a master seed and a named path of integers."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class EmitterProfile:
    emitter_id: int
    iq_gain_imbalance: float = 1.0
    iq_phase_imbalance: float = 0.0
    carrier_freq_offset: float = 0.0
    dc_offset_i: float = 0.0
    dc_offset_q: float = 0.0
    phase_noise_std: float = 0.0
    nonlinearity_coeff: float = 0.0

    def __post_init__(self):
        if not self.iq_gain_imbalance > 0:
            raise ConfigError("iq_gain_imbalance must be > 0")
        if self.phase_noise_std < 0:
            raise ConfigError("phase_noise_std must be >= 0")


@dataclass
class ChannelModel:
    taps: list

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=complex)
        if taps.size == 0:
            raise ConfigError("channel needs at least one tap")
        if not np.sum(np.abs(taps) ** 2) > 0:
            raise ConfigError("channel tap energy must be > 0")

    def as_array(self):
        return np.asarray(self.taps, dtype=complex)


def rrc_taps(sps=SAMPLES_PER_SYMBOL, beta=RRC_ROLLOFF, span=RRC_SPAN):
    """Root-raised-cosine filter with unit energy per symbol after upsampling."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1 - beta + 4 * beta / np.pi
        elif beta > 0 and abs(abs(4 * beta * ti) - 1) < 1e-12:
            h[i] = (beta / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                                         + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta)))
        else:
            num = np.sin(np.pi * ti * (1 - beta)) + 4 * beta * ti * np.cos(np.pi * ti * (1 + beta))
            h[i] = num / (np.pi * ti * (1 - (4 * beta * ti) ** 2))
    return h * np.sqrt(sps) / np.linalg.norm(h)


def clean_waveform(seed, length):
    """Pulse-shaped random QPSK with unit average power, ``length`` samples."""
    rng = np.random.default_rng(seed)
    taps = rrc_taps()
    delay = (taps.size - 1) // 2
    n_sym = math.ceil((length + taps.size) / SAMPLES_PER_SYMBOL) + 1
    bits = rng.integers(0, 2, size=(n_sym, 2))
    symbols = ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / np.sqrt(2)
    up = np.zeros(n_sym * SAMPLES_PER_SYMBOL, dtype=complex)
    up[::SAMPLES_PER_SYMBOL] = symbols
    shaped = np.convolve(up, taps)
    return shaped[delay + taps.size:delay + taps.size + length], rng


def synthesize_burst(profile, seed, length):
    """Clean burst passed through ``profile``'s transmitter impairments.

    Order: cubic nonlinearity, IQ imbalance, DC offset, CFO rotation,
    phase-noise random walk.
    """
    if length < 64:
        raise ConfigError("burst length must be >= 64")
    s, rng = clean_waveform(seed, length)
    p = profile
    if p.nonlinearity_coeff:
        s = s + p.nonlinearity_coeff * s * np.abs(s) ** 2
    if p.iq_gain_imbalance != 1.0 or p.iq_phase_imbalance:
        i, q = s.real, s.imag
        phi = p.iq_phase_imbalance
        q = p.iq_gain_imbalance * (q * np.cos(phi) - i * np.sin(phi))
        s = i + 1j * q
    if p.dc_offset_i or p.dc_offset_q:
        s = s + (p.dc_offset_i + 1j * p.dc_offset_q)
    n = np.arange(length)
    if p.carrier_freq_offset:
        s = s * np.exp(2j * np.pi * p.carrier_freq_offset * n)
    if p.phase_noise_std > 0:
        walk = np.cumsum(rng.normal(0.0, p.phase_noise_std, size=length))
        s = s * np.exp(1j * walk)
    return s


def apply_channel_awgn(s, channel, snr_db, rng):
    """r = s * h + n, with n scaled to ``snr_db`` against the post-channel power.

    ``snr_db`` may be ``math.inf`` for a noise-free output. The convolution is
    causal and truncated to ``len(s)``.
    """
    taps = channel.as_array() if isinstance(channel, ChannelModel) else np.asarray(channel, complex)
    if taps.size == 0:
        raise ConfigError("channel needs at least one tap")
    s = np.asarray(s, dtype=complex)
    r = np.convolve(s, taps)[:s.size]
    if math.isinf(snr_db) and snr_db > 0:
        return r
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite or +inf, got {snr_db}")
    p_sig = np.mean(np.abs(r) ** 2)
    p_noise = p_sig / 10 ** (snr_db / 10)
    noise = rng.normal(size=s.size) + 1j * rng.normal(size=s.size)
    return r + noise * np.sqrt(p_noise / 2)


def minmax_normalize(data, bounds=None, clip=False):
    """Affine map to [0, 1] by global min/max; returns ``(normalized, (lo, hi))``.

    With ``bounds`` given, that (lo, hi) pair is reused instead of being
    measured. ``clip`` clamps the result to [0, 1], for data normalized with
    bounds measured elsewhere.
    """
    data = np.asarray(data)
    if data.size == 0:
        raise ConfigError("cannot normalize an empty dataset")
    if bounds is None:
        lo, hi = float(data.min()), float(data.max())
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
    if not hi > lo:
        raise ConfigError("degenerate dataset: max == min")
    out = (data - lo) / (hi - lo)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float64, copy=False), (lo, hi)


def denormalize(data, bounds):
    lo, hi = bounds
    return np.asarray(data) * (hi - lo) + lo


def awgn_perturb(x, snr_db, rng):
    """Add real white Gaussian noise to one normalized 2 x L record.

    Noise power is set against the record's AC power (per-channel mean
    removed). ``snr_db`` is a number, ``math.inf``, or a ``(low, high)``
    range from which the SNR is drawn uniformly.
    """
    x = np.asarray(x)
    if isinstance(snr_db, (tuple, list)):
        lo, hi = snr_db
        snr_db = float(rng.uniform(lo, hi))
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    ac = x - x.mean(axis=-1, keepdims=True)
    p_sig = float(np.mean(ac * ac))
    if p_sig <= 0:
        raise ConfigError("zero-power record cannot be perturbed at a finite SNR")
    sigma = math.sqrt(p_sig / 10 ** (snr_db / 10))
    return (x + rng.normal(0.0, sigma, size=x.shape)).astype(x.dtype, copy=False)


def perturb_batch(x, snr_db, seeds):
    """``awgn_perturb`` applied per record, each with its own seed."""
    out = np.empty_like(x)
    for i, s in enumerate(seeds):
        out[i] = awgn_perturb(x[i], snr_db, np.random.default_rng(s))
    return out


@dataclass
class ImpairmentSpread:
    """Half-widths of the per-emitter impairment draws (centered on ideal)."""
    gain_imbalance: float = 0.15      # gain drawn from 1 +/- this
    phase_imbalance: float = 0.25     # radians
    cfo: float = 2e-3                 # cycles/sample
    dc_offset: float = 0.25           # per rail
    phase_noise_std: float = 0.01     # drawn from [0, this]
    nonlinearity: float = 0.1
    channel_taps: int = 3
    channel_spread: float = 0.2       # magnitude scale of the echo taps
    min_separation: float = 0.6       # floor on pairwise distance in normalized units


@dataclass
class DatasetConfig:
    n_known: int = 8
    n_rogue: int = 2
    samples_per_class: int = 200
    length: int = 1024
    capture_snr_db: float = 30.0
    seed: int = 0
    split: tuple = (0.64, 0.16, 0.20)
    impairments: ImpairmentSpread = field(default_factory=ImpairmentSpread)

    def validate(self):
        if self.n_known < 1 or self.n_rogue < 1 or self.n_known + self.n_rogue < 2:
            raise ConfigError("need at least one known and one rogue class")
        if self.samples_per_class < 10:
            raise ConfigError("samples_per_class must be >= 10")
        if self.length < 64:
            raise ConfigError("length must be >= 64")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        if self.split[0] <= 0:
            raise ConfigError("train fraction must be > 0")


_IMPAIRMENT_DIMS = 7


def draw_profiles(n, spread, seed, max_tries=10000):
    """``n`` profiles whose normalized impairment vectors are pairwise >= the floor apart."""
    rng = np.random.default_rng(child_seed(seed, _PROFILE_STREAM))
    units = []
    tries = 0
    while len(units) < n:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"could not place {n} emitters with min_separation "
                              f"{spread.min_separation}; lower it or shrink the class count")
        u = rng.uniform(-1.0, 1.0, size=_IMPAIRMENT_DIMS)
        if all(np.linalg.norm(u - v) >= spread.min_separation for v in units):
            units.append(u)
    profiles = []
    for k, u in enumerate(units):
        profiles.append(EmitterProfile(
            emitter_id=k,
            iq_gain_imbalance=float(1.0 + spread.gain_imbalance * u[0]),
            iq_phase_imbalance=float(spread.phase_imbalance * u[1]),
            carrier_freq_offset=float(spread.cfo * u[2]),
            dc_offset_i=float(spread.dc_offset * u[3]),
            dc_offset_q=float(spread.dc_offset * u[4]),
            phase_noise_std=float(spread.phase_noise_std * (u[5] + 1) / 2),
            nonlinearity_coeff=float(spread.nonlinearity * u[6]),
        ))
    return profiles


def draw_channels(n, spread, seed):
    channels = []
    for k in range(n):
        rng = np.random.default_rng(child_seed(seed, _CHANNEL_STREAM, k))
        taps = np.zeros(max(1, spread.channel_taps), dtype=complex)
        taps[0] = 1.0
        m = taps.size - 1
        if m:
            decay = 0.5 ** np.arange(1, m + 1)
            taps[1:] = spread.channel_spread * decay * (rng.normal(size=m) + 1j * rng.normal(size=m))
        channels.append(ChannelModel([complex(t) for t in taps]))
    return channels


@dataclass
class IQDataset:
    records: np.ndarray            # (N, 2, L) float32
    labels: np.ndarray             # (N,) int32
    splits: np.ndarray             # (N,) uint8
    known_classes: tuple
    rogue_classes: tuple
    norm: tuple                    # (min, max) measured on the train split
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.known_classes) & set(self.rogue_classes):
            raise ConfigError("known and rogue classes overlap")
        rogue = np.isin(self.labels, list(self.rogue_classes))
        if np.any(rogue & (self.splits != SPLIT_TEST)):
            raise ConfigError("rogue records may only appear in the test split")

    @property
    def length(self):
        return self.records.shape[-1]

    @property
    def n_known(self):
        return len(self.known_classes)

    def select(self, split):
        code = SPLIT_NAMES[split] if isinstance(split, str) else split
        idx = np.flatnonzero(self.splits == code)
        return self.records[idx], self.labels[idx]

    def is_known(self, labels):
        return np.isin(labels, list(self.known_classes))

    def save(self, path):
        path = Path(path)
        write_dataset(path, self)
        sidecar = path.with_suffix(path.suffix + ".json")
        meta = dict(self.metadata)
        meta.update(known_classes=list(self.known_classes),
                    rogue_classes=list(self.rogue_classes))
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        records, labels, splits, norm = read_dataset(path)
        sidecar = path.with_suffix(path.suffix + ".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            known = tuple(meta.get("known_classes", ()))
            rogue = tuple(meta.get("rogue_classes", ()))
        else:
            meta = {}
            known = tuple(sorted(set(labels[splits != SPLIT_TEST].tolist())))
            rogue = tuple(sorted(set(labels.tolist()) - set(known)))
        return cls(records, labels, splits, known, rogue, norm, meta)


_MAGIC = b"REDS"
_HEADER = struct.Struct("<4sIIIIdd")


def write_dataset(path, ds):
    recs = np.asarray(ds.records, dtype="<f4")
    n, ch, length = recs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n, length, ch, ds.norm[0], ds.norm[1]))
        tag = struct.Struct("<iB")
        for i in range(n):
            fh.write(tag.pack(int(ds.labels[i]), int(ds.splits[i])))
            # interleaved I0 Q0 I1 Q1 ...
            fh.write(np.ascontiguousarray(recs[i].T).tobytes())


def read_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("dataset file truncated")
    magic, version, n, length, ch, lo, hi = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != 1 or ch != 2:
        raise FormatError(f"unsupported dataset version {version} / channels {ch}")
    rec_bytes = 5 + 4 * ch * length
    if len(raw) != _HEADER.size + n * rec_bytes:
        raise FormatError("dataset file size does not match header")
    dt = np.dtype([("label", "<i4"), ("split", "u1"), ("iq", "<f4", (length, ch))])
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=_HEADER.size)
    records = np.ascontiguousarray(arr["iq"].transpose(0, 2, 1)).astype(np.float32)
    return records, arr["label"].astype(np.int32), arr["split"].astype(np.uint8), (lo, hi)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_counts(n, fractions):
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_dataset(config):
    """Simulate, split and normalize a dataset per ``config``.

    Known classes get labels 0..n_known-1 and rogue classes follow. Each
    record's burst, noise and channel draw come from a seed derived from
    (master seed, record index), so generation order does not matter.
    """
    config.validate()
    n_cls = config.n_known + config.n_rogue
    spread = config.impairments
    profiles = draw_profiles(n_cls, spread, config.seed)
    channels = draw_channels(n_cls, spread, config.seed)
    per = config.samples_per_class
    length = config.length

    raw = np.empty((n_cls * per, 2, length), dtype=np.float64)
    labels = np.repeat(np.arange(n_cls, dtype=np.int32), per)
    for idx in range(n_cls * per):
        k = int(labels[idx])
        seed = child_seed(config.seed, _RECORD_STREAM, idx)
        rng = np.random.default_rng(seed)
        burst = synthesize_burst(profiles[k], int(rng.integers(2 ** 63)), length)
        r = apply_channel_awgn(burst, channels[k], config.capture_snr_db, rng)
        raw[idx, 0] = r.real
        raw[idx, 1] = r.imag

    splits = np.full(n_cls * per, SPLIT_TEST, dtype=np.uint8)
    n_train, n_val, _ = _split_counts(per, config.split)
    for k in range(config.n_known):
        rng = np.random.default_rng(child_seed(config.seed, _SPLIT_STREAM, k))
        order = k * per + rng.permutation(per)
        splits[order[:n_train]] = SPLIT_TRAIN
        splits[order[n_train:n_train + n_val]] = SPLIT_VAL

    train = splits == SPLIT_TRAIN
    _, bounds = minmax_normalize(raw[train])
    records = np.empty_like(raw, dtype=np.float32)
    records[train] = minmax_normalize(raw[train], bounds)[0]
    records[~train] = minmax_normalize(raw[~train], bounds, clip=True)[0]

    cfg = asdict(config)
    cfg["split"] = list(config.split)
    metadata = {
        "config": cfg,
        "profiles": [asdict(p) for p in profiles],
        "channels": [[[t.real, t.imag] for t in c.as_array()] for c in channels],
        "record_seed_rule": "child_seed(seed, 3, record_index)",
    }
    return IQDataset(records, labels, splits,
                     tuple(range(config.n_known)),
                     tuple(range(config.n_known, n_cls)),
                     bounds, metadata)
