import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from redkit.errors import ConfigError, FormatError
from redkit.signal_sim import (
    SPLIT_TEST, SPLIT_TRAIN, ChannelModel, DatasetConfig, EmitterProfile, IQDataset,
    apply_channel_awgn, awgn_perturb, build_dataset, clean_waveform, denormalize,
    draw_profiles, file_sha256, ImpairmentSpread, minmax_normalize, synthesize_burst,
)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(DatasetConfig(n_known=4, n_rogue=1, samples_per_class=20, length=256,
                                       seed=3))


# synthesize_burst

def test_identity_profile_is_clean_waveform():
    clean, _ = clean_waveform(42, 512)
    np.testing.assert_array_equal(synthesize_burst(EmitterProfile(0), 42, 512), clean)


def test_clean_waveform_unit_power():
    s, _ = clean_waveform(0, 4096)
    assert np.mean(np.abs(s) ** 2) == pytest.approx(1.0, rel=0.1)


def test_cfo_shifts_spectrum_peak():
    length = 4096
    base = synthesize_burst(EmitterProfile(0), 7, length)
    shifted = synthesize_burst(EmitterProfile(0, carrier_freq_offset=0.01), 7, length)
    freqs = np.fft.fftfreq(length)
    # spectral centroid of |S|^2 as the peak location of the smooth RRC spectrum
    def centroid(s):
        p = np.abs(np.fft.fft(s)) ** 2
        return np.sum(freqs * p) / np.sum(p)
    assert centroid(shifted) - centroid(base) == pytest.approx(0.01, abs=1e-3)
    # a pure tone lands exactly on the shifted bin
    tone = synthesize_burst(EmitterProfile(0, carrier_freq_offset=0.01, dc_offset_i=50.0),
                            7, length)
    assert freqs[np.argmax(np.abs(np.fft.fft(tone)))] == pytest.approx(0.01, abs=1.0 / length)


def test_burst_deterministic():
    p = EmitterProfile(1, 1.1, 0.1, 1e-3, 0.1, -0.1, 0.01, 0.05)
    assert synthesize_burst(p, 5, 256).tobytes() == synthesize_burst(p, 5, 256).tobytes()


def test_burst_min_length():
    with pytest.raises(ConfigError):
        synthesize_burst(EmitterProfile(0), 0, 32)


def test_profile_invariants():
    with pytest.raises(ConfigError):
        EmitterProfile(0, iq_gain_imbalance=0.0)
    with pytest.raises(ConfigError):
        EmitterProfile(0, phase_noise_std=-1.0)


# channel + awgn

def test_channel_noise_free_identity(rng):
    s = rng.standard_normal(100) + 1j * rng.standard_normal(100)
    np.testing.assert_array_equal(apply_channel_awgn(s, ChannelModel([1]), math.inf, rng), s)


def test_channel_delay_tap(rng):
    s = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    r = apply_channel_awgn(s, ChannelModel([0, 1]), math.inf, rng)
    assert r[0] == 0 and np.array_equal(r[1:], s[:-1])


def test_channel_zero_db_power_ratio():
    rng = np.random.default_rng(0)
    ratios = []
    for i in range(100):
        s, _ = clean_waveform(i, 1024)
        r = apply_channel_awgn(s, ChannelModel([1]), 0.0, rng)
        ratios.append(np.mean(np.abs(r - s) ** 2) / np.mean(np.abs(s) ** 2))
    assert 0.9 <= np.mean(ratios) <= 1.1


def test_channel_needs_taps():
    with pytest.raises(ConfigError):
        ChannelModel([])
    with pytest.raises(ConfigError):
        ChannelModel([0, 0])


def test_awgn_perturb_inf_is_identity(rng):
    x = rng.uniform(size=(2, 128))
    np.testing.assert_array_equal(awgn_perturb(x, math.inf, rng), x)


def test_awgn_perturb_zero_db():
    x = np.random.default_rng(1).uniform(size=(2, 1024))
    ac = np.mean((x - x.mean(axis=1, keepdims=True)) ** 2)
    for seed in range(20):
        y = awgn_perturb(x, 0.0, np.random.default_rng(seed))
        assert 0.8 <= np.mean((y - x) ** 2) / ac <= 1.25


def test_awgn_perturb_reproducible_and_unclamped():
    x = np.random.default_rng(1).uniform(size=(2, 256))
    a = awgn_perturb(x, 0.0, np.random.default_rng(9))
    b = awgn_perturb(x, 0.0, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    assert a.min() < 0 or a.max() > 1


def test_awgn_perturb_range_draw():
    x = np.random.default_rng(1).uniform(size=(2, 256))
    y = awgn_perturb(x, (10.0, 10.0), np.random.default_rng(0))
    z = awgn_perturb(x, 10.0, np.random.default_rng(0))
    assert y.shape == x.shape and not np.array_equal(y, x)
    assert np.mean((y - x) ** 2) == pytest.approx(np.mean((z - x) ** 2), rel=0.3)


def test_awgn_perturb_zero_power():
    with pytest.raises(ConfigError):
        awgn_perturb(np.full((2, 64), 0.5), 10.0, np.random.default_rng(0))


# normalization

def test_minmax_examples():
    y, b = minmax_normalize(np.arange(11.0))
    np.testing.assert_allclose(y, np.arange(11.0) / 10)
    assert b == (0.0, 10.0)
    x = np.array([0.0, 0.3, 1.0])
    np.testing.assert_array_equal(minmax_normalize(x)[0], x)
    assert minmax_normalize(np.array([1.0]), bounds=(-3.0, 5.0))[0][0] == 0.5


def test_minmax_degenerate():
    with pytest.raises(ConfigError):
        minmax_normalize(np.ones(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40).filter(lambda v: max(v) > min(v)))
def test_minmax_invertible(values):
    x = np.array(values)
    y, b = minmax_normalize(x)
    assert y.min() >= 0 and y.max() <= 1
    np.testing.assert_allclose(denormalize(y, b), x, atol=1e-9 * max(1, np.abs(x).max()))


# profiles / dataset

def test_profiles_respect_separation_floor():
    spread = ImpairmentSpread(min_separation=0.8)
    profiles = draw_profiles(10, spread, seed=0)
    assert len(profiles) == 10
    with pytest.raises(ConfigError):
        draw_profiles(50, ImpairmentSpread(min_separation=5.0), seed=0, max_tries=200)


def test_split_arithmetic():
    ds = build_dataset(DatasetConfig(n_known=8, n_rogue=2, samples_per_class=100, length=64))
    known = ds.is_known(ds.labels)
    assert np.sum(known & (ds.splits != SPLIT_TEST)) == 640
    assert np.sum(known & (ds.splits == SPLIT_TEST)) == 160
    assert np.sum(~known) == 200 and np.all(ds.splits[~known] == SPLIT_TEST)
    assert np.sum(known) == 800


def test_dataset_invariants(small_ds):
    ds = small_ds
    assert set(ds.known_classes).isdisjoint(ds.rogue_classes)
    _, ytr = ds.select("train")
    assert not np.any(np.isin(ytr, ds.rogue_classes))
    assert ds.records.min() >= 0.0 and ds.records.max() <= 1.0
    xtr, _ = ds.select("train")
    assert xtr.min() == 0.0 and xtr.max() == 1.0


def test_dataset_rejects_rogue_in_train(small_ds):
    splits = small_ds.splits.copy()
    splits[small_ds.labels == small_ds.rogue_classes[0]] = SPLIT_TRAIN
    with pytest.raises(ConfigError):
        IQDataset(small_ds.records, small_ds.labels, splits, small_ds.known_classes,
                  small_ds.rogue_classes, small_ds.norm)


def test_dataset_degenerate_config():
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(n_known=1, n_rogue=0))
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(samples_per_class=5))


def test_same_seed_same_checksum(tmp_path):
    cfg = DatasetConfig(n_known=3, n_rogue=1, samples_per_class=10, length=128, seed=11)
    a = build_dataset(cfg).save(tmp_path / "a.reds")
    b = build_dataset(cfg).save(tmp_path / "b.reds")
    assert file_sha256(a) == file_sha256(b)


def test_dataset_roundtrip_bit_exact(small_ds, tmp_path):
    path = small_ds.save(tmp_path / "d.reds")
    back = IQDataset.load(path)
    assert back.records.tobytes() == small_ds.records.tobytes()
    assert np.array_equal(back.labels, small_ds.labels)
    assert np.array_equal(back.splits, small_ds.splits)
    assert back.norm == small_ds.norm
    assert back.known_classes == small_ds.known_classes
    assert back.rogue_classes == small_ds.rogue_classes


def test_dataset_file_layout(small_ds, tmp_path):
    import struct
    path = small_ds.save(tmp_path / "d.reds")
    raw = path.read_bytes()
    magic, version, n, length, ch, lo, hi = struct.unpack_from("<4sIIIIdd", raw, 0)
    assert (magic, version, n, length, ch) == (b"REDS", 1, len(small_ds.labels), 256, 2)
    off = struct.calcsize("<4sIIIIdd")
    label, split = struct.unpack_from("<iB", raw, off)
    i0, q0, i1 = struct.unpack_from("<fff", raw, off + 5)
    rec = small_ds.records[0]
    assert (label, split) == (small_ds.labels[0], small_ds.splits[0])
    assert (i0, q0, i1) == (rec[0, 0], rec[1, 0], rec[0, 1])


def test_dataset_bad_magic(tmp_path):
    p = tmp_path / "bad.reds"
    p.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(FormatError):
        IQDataset.load(p)


def test_records_depend_only_on_seed_and_index():
    # adding a rogue class appends records; the known-class records are untouched
    a = build_dataset(DatasetConfig(n_known=2, n_rogue=1, samples_per_class=10, length=64, seed=5))
    b = build_dataset(DatasetConfig(n_known=2, n_rogue=2, samples_per_class=10, length=64, seed=5))
    n = 20
    assert a.records[:n].tobytes() == b.records[:n].tobytes()


def test_fingerprints_distinguishable():
    """Nearest-centroid on FFT magnitudes beats chance on 4 emitters."""
    ds = build_dataset(DatasetConfig(n_known=4, n_rogue=1, samples_per_class=40, length=256,
                                     seed=2, split=(0.5, 0.0, 0.5)))
    mag = np.abs(np.fft.fft(ds.records[:, 0] + 1j * ds.records[:, 1], axis=1))
    train = ds.splits == SPLIT_TRAIN
    test = ~train & ds.is_known(ds.labels)
    cents = np.stack([mag[train & (ds.labels == k)].mean(0) for k in ds.known_classes])
    pred = np.argmin(((mag[test][:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels[test]) > 0.25 + 0.2
