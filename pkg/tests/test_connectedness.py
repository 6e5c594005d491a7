import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netrisk import qbll
from netrisk.connectedness import (
    ConnectednessSeries,
    connectedness_path,
    from_connectedness,
    measures_from_theta,
    net_directional,
    summarize_draws,
    to_connectedness,
    total_connectedness,
)
from netrisk.spectral import band_gfevd_many, default_bands, normalize_adjacency, var_to_vma

from helpers import ONE_SHOT, random_system

HALF = np.full((2, 2), 0.5)


def test_total_identity_is_zero():
    assert total_connectedness(np.eye(3), np.eye(3)) == 0


def test_total_half_matrix():
    assert total_connectedness(HALF, HALF) == pytest.approx(50.0)


def test_from_examples():
    np.testing.assert_array_equal(from_connectedness(np.eye(3), np.eye(3)), 0)
    np.testing.assert_allclose(from_connectedness(HALF, HALF), [25, 25])
    assert from_connectedness(HALF, HALF, j=1) == pytest.approx(25)
    with pytest.raises(IndexError):
        from_connectedness(HALF, HALF, j=2)


def test_to_examples():
    np.testing.assert_array_equal(to_connectedness(np.eye(3), np.eye(3)), 0)
    theta = band_gfevd_many(ONE_SHOT, np.eye(2), default_bands())
    m = measures_from_theta(theta)
    to = m["to"][-1]
    assert to[0] > 0 and to[1] == 0
    sym = np.array([[0.7, 0.3], [0.3, 0.7]])
    np.testing.assert_allclose(to_connectedness(sym, sym), from_connectedness(sym, sym))


def test_net_examples():
    assert net_directional(2.0, 2.0) == 0
    assert net_directional(5, 2) == 3


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        total_connectedness(np.eye(2), np.eye(3))


def test_summarize_examples():
    q = summarize_draws(np.full(10, 3.5))
    np.testing.assert_array_equal(q, 3.5)
    assert summarize_draws([1.0, 2.0, 3.0])[1] == 2.0
    with pytest.raises(ValueError):
        summarize_draws([1.0])


def test_summarize_sampling():
    rng = np.random.default_rng(0)
    q = summarize_draws(rng.standard_normal(500))
    # 16th/84th percentiles of N(0,1) are -/+0.9945; MC sd of a sample quantile ~ 0.065 here
    np.testing.assert_allclose(q, [-0.9945, 0.0, 0.9945], atol=0.2)


def test_random_system_band_additivity():
    Phi, S = random_system(7)
    m = measures_from_theta(band_gfevd_many(var_to_vma(Phi, 100), S, default_bands()))
    assert m["total"][0] + m["total"][1] == pytest.approx(m["total"][2], abs=1e-8)
    for key in ("from", "to", "net"):
        np.testing.assert_allclose(m[key][0] + m[key][1], m[key][2], atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_measure_invariants(seed, scale):
    Phi, S = random_system(seed, N=4, p=1)
    th = band_gfevd_many(var_to_vma(Phi, 100), S, default_bands())
    m = measures_from_theta(th)
    np.testing.assert_allclose(m["net"].sum(axis=-1), 0, atol=1e-8)
    np.testing.assert_allclose(m["from"].sum(axis=-1), m["total"], atol=1e-10)
    np.testing.assert_allclose(m["to"].sum(axis=-1), m["total"], atol=1e-10)
    np.testing.assert_allclose(m["total"][0] + m["total"][1], m["total"][2], atol=1e-8)
    m2 = measures_from_theta(band_gfevd_many(var_to_vma(Phi, 100), scale * S, default_bands()))
    for key in ("total", "from", "to", "net"):
        np.testing.assert_allclose(m2[key], m[key], atol=1e-9)


def test_normalizer_is_full_aggregate_sum():
    Phi, S = random_system(8, N=3)
    th = band_gfevd_many(var_to_vma(Phi, 100), S, default_bands())
    tt = normalize_adjacency(th, th[-1])
    assert tt[-1].sum() == pytest.approx(3.0, abs=1e-12)
    off = tt[0].sum() - np.trace(tt[0])
    assert total_connectedness(tt[0], tt[-1]) == pytest.approx(100 * off / 3)


def _field(T=40, N=3, draws=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((T, N))
    for t in range(1, T):
        y[t] = 0.4 * y[t - 1] + 0.1 * y[t - 1, ::-1] + rng.standard_normal(N)
    return qbll.estimate_path(y, qbll.QBLLConfig(p=1, n_draws=draws, shrinkage=0.3, seed=seed))


def test_path_shapes_and_roundtrip(tmp_path):
    f = _field()
    s = connectedness_path(f, default_bands(), H=50, n_freq=128, asset_ids=["x", "y", "z"])
    G = len(f.ks)
    assert s.total.shape == (3, G, 3)
    assert s.net.shape == (3, G, 3, 3)
    assert (s.total[0] <= s.total[1]).all() and (s.total[1] <= s.total[2]).all()
    s.to_csv(tmp_path)
    r = ConnectednessSeries.read_csv(tmp_path)
    assert r.bands == ["short", "long", "aggregate"] and r.asset_ids == ["x", "y", "z"]
    np.testing.assert_allclose(r.net, s.net, atol=1e-10)
    np.testing.assert_allclose(r.total, s.total, atol=1e-10)


def test_path_workers_identical():
    f = _field(seed=1)
    a = connectedness_path(f, default_bands(), H=50, n_freq=128, workers=1)
    b = connectedness_path(f, default_bands(), H=50, n_freq=128, workers=2)
    np.testing.assert_array_equal(a.net, b.net)
    np.testing.assert_array_equal(a.median_theta, b.median_theta)


def test_path_requires_aggregate_last():
    with pytest.raises(ValueError):
        connectedness_path(_field(), default_bands()[::-1])
