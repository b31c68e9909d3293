import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from redkit.baselines import (
    average_path_length, iforest_fit, iforest_score, lof_fit, lof_score,
)
from redkit.errors import ConfigError

from oracles import lof_bruteforce


def test_lof_line_plus_outlier():
    ref = np.array([[0.0], [1.0], [2.0], [3.0]])
    score = lof_score(lof_fit(ref, k=2), [[100.0]])[0]
    assert score == pytest.approx(65.0, rel=1e-12)   # (2/3) / (1/97.5)
    assert score > 10


def test_lof_grid_inlier():
    g = np.array([[i, j] for i in range(10) for j in range(10)], dtype=float)
    assert 0.9 <= lof_score(lof_fit(g, k=4), [[4.5, 4.5]])[0] <= 1.1


def test_lof_duplicate_of_cluster_point(rng):
    ref = rng.standard_normal((100, 2))
    s = lof_score(lof_fit(ref, k=10), ref[:1])[0]
    assert s == pytest.approx(lof_bruteforce(ref, ref[:1], 10)[0], abs=1e-9)
    assert 0.8 <= s <= 1.25


def test_lof_coincident_points_finite():
    ref = np.zeros((10, 2))
    assert np.isfinite(lof_score(lof_fit(ref, k=3), [[0.0, 0.0], [1.0, 1.0]])).all()


def test_lof_errors():
    with pytest.raises(ConfigError):
        lof_fit(np.zeros((5, 2)), k=5)
    with pytest.raises(ConfigError):
        lof_score(None, [[0.0]])


@settings(max_examples=15, deadline=None)
@given(st.integers(5, 60), st.integers(1, 4), st.integers(0, 2**31), st.booleans())
def test_lof_matches_bruteforce(n, k, seed, grid):
    rng = np.random.default_rng(seed)
    ref = (rng.integers(0, 4, (n, 2)) if grid else rng.standard_normal((n, 3))).astype(float)
    q = (rng.integers(-1, 6, (6, 2)) if grid else rng.standard_normal((6, 3)) * 2).astype(float)
    k = min(k, n - 1)
    np.testing.assert_allclose(lof_score(lof_fit(ref, k), q), lof_bruteforce(ref, q, k),
                               rtol=1e-9, atol=1e-9)


def test_lof_translation_invariant(rng):
    ref = rng.standard_normal((50, 3))
    q = rng.standard_normal((5, 3)) * 3
    shift = np.array([1e3, -7.0, 0.5])
    a = lof_score(lof_fit(ref, 5), q)
    b = lof_score(lof_fit(ref + shift, 5), q + shift)
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_average_path_length():
    assert average_path_length(1) == 0 and average_path_length(2) == 1
    # harmonic number approximated by ln(i) + Euler's constant
    expect = 2 * (np.log(255) + 0.5772156649015329) - 2 * 255 / 256
    assert average_path_length(256) == pytest.approx(expect, abs=1e-12)
    exact = 2 * sum(1.0 / i for i in range(1, 256)) - 2 * 255 / 256
    assert average_path_length(256) == pytest.approx(exact, abs=0.01)


def test_iforest_degenerate_all_equal():
    ref = np.full((300, 2), 3.0)
    assert iforest_score(iforest_fit(ref, seed=0), [[3.0, 3.0]])[0] == pytest.approx(0.5, abs=1e-12)


def test_iforest_outlier_vs_cluster(rng):
    ref = rng.standard_normal((256, 2))
    model = iforest_fit(ref, n_trees=100, seed=0)
    out, inner = iforest_score(model, [[8.0, 8.0], [0.0, 0.0]])
    assert out > 0.6 and inner < 0.55
    assert (0 < iforest_score(model, ref)).all() and (iforest_score(model, ref) < 1).all()


def test_iforest_tree_height(rng):
    model = iforest_fit(rng.standard_normal((500, 3)), n_trees=10, psi=64, seed=1)

    def height(node):
        return node.depth if node.left is None else max(height(node.left), height(node.right))

    assert max(height(t) for t in model.trees) <= int(np.ceil(np.log2(64)))


def test_iforest_deterministic_and_permutation_invariant(rng):
    ref = rng.standard_normal((300, 4))
    q = rng.standard_normal((20, 4)) * 2
    a = iforest_score(iforest_fit(ref, seed=5), q)
    assert a.tobytes() == iforest_score(iforest_fit(ref, seed=5), q).tobytes()
    b = iforest_score(iforest_fit(ref[rng.permutation(300)], seed=5), q)
    assert a.tobytes() == b.tobytes()


def test_iforest_translation_invariant(rng):
    # dyadic values and a power-of-two shift keep every subtraction exact
    ref = rng.integers(-512, 512, (300, 3)) / 64.0
    q = rng.integers(-1024, 1024, (10, 3)) / 64.0
    shift = np.array([64.0, -32.0, 128.0])
    a = iforest_score(iforest_fit(ref, seed=2), q)
    b = iforest_score(iforest_fit(ref + shift, seed=2), q + shift)
    np.testing.assert_array_equal(a, b)


def test_iforest_needs_two_points():
    with pytest.raises(ConfigError):
        iforest_fit(np.zeros((1, 2)))
