import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netrisk.pricing import (
    BetaPanel,
    build_controls,
    conditional_comoments,
    fama_macbeth,
    formation_rows,
    full_sample_betas,
    illiquidity,
    long_short,
    newey_west,
    predictive_sort,
    read_ff5,
    rolling_betas,
    shanken_multiplier,
    sort_on_beta,
)

FF5 = ["mkt_rf", "smb", "hml", "rmw", "cma"]


def dates(T):
    return pd.bdate_range("2015-01-01", periods=T)


def planted_economy(T=2000, N=50, lam=(-0.05, 0.04), seed=0):
    """Returns in percent: R = B f + e, factor sample means set exactly to the prices of risk."""
    rng = np.random.default_rng(seed)
    K = len(lam)
    z = rng.standard_normal((T, K))
    f = np.asarray(lam) + z - z.mean(axis=0)
    B = rng.uniform(-1, 2, (N, K))
    R = f @ B.T + 0.5 * rng.standard_normal((T, N))
    idx = dates(T)
    names = ["NET_aggregate", "mkt_rf"][:K]
    return (pd.DataFrame(R, index=idx, columns=[f"s{i}" for i in range(N)]),
            pd.DataFrame(f, index=idx, columns=names), B)


# ---------------------------------------------------------------- NW / Shanken


def test_nw_lag_zero():
    x = np.random.default_rng(0).standard_normal(100)
    assert newey_west(x, 0) == pytest.approx(x.var() / 100, rel=1e-14)


def test_nw_ar1_ratio():
    rng = np.random.default_rng(1)
    T, phi = 200_000, 0.5
    e = rng.standard_normal(T)
    x = np.empty(T)
    x[0] = e[0]
    for t in range(1, T):
        x[t] = phi * x[t - 1] + e[t]
    ratio = newey_west(x, 100) / newey_west(x, 0)
    assert ratio == pytest.approx((1 + phi) / (1 - phi), rel=0.1)


def test_nw_white_noise():
    x = np.random.default_rng(2).standard_normal(3000)
    assert newey_west(x, 12) == pytest.approx(newey_west(x, 0), rel=0.15)


def test_nw_bad_lags():
    with pytest.raises(ValueError):
        newey_west(np.ones(5), 5)


def test_shanken_examples():
    assert shanken_multiplier([0.0], [[0.3]]) == 1.0
    assert shanken_multiplier([0.2], [[0.04]]) == pytest.approx(2.0, abs=1e-12)
    assert shanken_multiplier([0.1, 0.0], np.diag([0.04, 1.0])) == pytest.approx(1.25, abs=1e-12)
    with pytest.raises(ValueError):
        shanken_multiplier([0.1], [[0.0]])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.integers(0, 1000))
def test_shanken_at_least_one(lam, seed):
    A = np.random.default_rng(seed).normal(size=(2, 2))
    S = A @ A.T + 0.1 * np.eye(2)
    c = shanken_multiplier(lam, S)
    z = np.linalg.solve(S, lam)
    assert c == pytest.approx(1 + np.dot(lam, z), rel=1e-10)
    assert c >= 1
    if not np.any(lam):
        assert c == 1


# ---------------------------------------------------------------- betas


def test_noiseless_beta():
    rng = np.random.default_rng(3)
    f = pd.DataFrame({"m": rng.standard_normal(100)}, index=dates(100))
    R = pd.DataFrame({"a": 0.1 + 1.7 * f["m"], "b": -0.3 * f["m"]})
    bp = rolling_betas(R, f, window=30)
    np.testing.assert_allclose(bp.factor("m").iloc[29:].to_numpy(), np.tile([1.7, -0.3], (71, 1)), atol=1e-12)
    np.testing.assert_allclose(bp.alpha[29:, 0], 0.1, atol=1e-12)
    assert np.isnan(bp.beta[:29]).all()


def test_constant_factor_window_flagged():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(100)
    x[40:80] = 0.5
    f = pd.DataFrame({"m": x}, index=dates(100))
    R = pd.DataFrame({"a": x + 0.01 * rng.standard_normal(100)}, index=dates(100))
    bp = rolling_betas(R, f, window=30)
    assert bp.deficient[79, 0] and np.isnan(bp.beta[79, 0, 0])
    assert not bp.deficient[99, 0] and np.isfinite(bp.beta[99, 0, 0])


def test_two_factor_betas_within_se():
    R, F, B = planted_economy(T=400, N=10, seed=5)
    bp = rolling_betas(R, F, window=300, nw_lags=5, se_every=50)
    t = 349
    z = (bp.beta[t] - B) / bp.se[t]
    assert np.mean(np.abs(z) < 2) >= 0.85


def test_rolling_matches_direct_ols():
    R, F, _ = planted_economy(T=120, N=4, seed=6)
    R.iloc[10, 1] = np.nan
    bp = rolling_betas(R, F, window=60)
    for t in (59, 90, 119):
        for i in range(4):
            y = R.iloc[t - 59 : t + 1, i].to_numpy()
            X = np.column_stack([np.ones(60), F.iloc[t - 59 : t + 1].to_numpy()])
            ok = np.isfinite(y)
            coef, *_ = np.linalg.lstsq(X[ok], y[ok], rcond=None)
            np.testing.assert_allclose(bp.beta[t, i], coef[1:], atol=1e-10)
            assert bp.alpha[t, i] == pytest.approx(coef[0], abs=1e-10)


def test_beta_csv_roundtrip(tmp_path):
    R, F, _ = planted_economy(T=80, N=3, seed=7)
    bp = rolling_betas(R, F, window=40)
    bp.to_csv(tmp_path / "b.csv")
    back = BetaPanel.read_csv(tmp_path / "b.csv", 40)
    assert back.factor_names == bp.factor_names
    np.testing.assert_allclose(back.beta, bp.beta[39:], atol=1e-11)


def test_window_too_long():
    R, F, _ = planted_economy(T=50, N=3)
    with pytest.raises(ValueError):
        rolling_betas(R, F, window=60)


# ---------------------------------------------------------------- FMB


def test_fmb_collinear_betas():
    rng = np.random.default_rng(8)
    R = pd.DataFrame(rng.standard_normal((30, 6)), index=dates(30), columns=list("abcdef"))
    B = pd.DataFrame({"f": np.ones(6)}, index=list("abcdef"))
    res = fama_macbeth(R, B, nw_lags=0)
    np.testing.assert_allclose(res.series["f"].to_numpy(), R.mean(axis=1).to_numpy(), atol=1e-14)
    assert res.intercept_indeterminate == 30
    assert np.isnan(res.series["intercept"]).all()


def test_fmb_lag_zero_se():
    R, F, _ = planted_economy(T=300, N=20, seed=9)
    res = fama_macbeth(R, full_sample_betas(R, F), nw_lags=0)
    for k, name in enumerate(res.names):
        x = res.series[name].to_numpy()
        assert res.se_nw[k] == pytest.approx(x.std(ddof=0) / math.sqrt(len(x)), rel=1e-12)


def test_fmb_planted_recovery():
    R, F, _ = planted_economy(seed=10)
    res = fama_macbeth(R, full_sample_betas(R, F), F, nw_lags=12)
    k = res.names.index("NET_aggregate")
    adj_se = res.se_nw[k] * math.sqrt(res.shanken)
    assert abs(res.lam[k] - (-0.05)) <= 2 * adj_se
    c = shanken_multiplier(res.lam[1:], np.cov(F.to_numpy(), rowvar=False))
    assert res.shanken == pytest.approx(c, abs=1e-12)
    assert np.all(np.abs(res.t_shanken) <= np.abs(res.t_nw))


def test_fmb_with_beta_panel():
    R, F, _ = planted_economy(T=400, N=20, seed=11)
    bp = rolling_betas(R, F, window=100)
    res = fama_macbeth(R, bp, F, nw_lags=5, beta_lag=1)
    assert res.series.index[0] == R.index[100]
    assert res.table().shape == (3, 4)


# ---------------------------------------------------------------- sorts


def _beta_panel(values, idx):
    values = np.asarray(values, dtype=float)
    return BetaPanel(idx, [f"s{i}" for i in range(values.shape[1])], ["x"], values[..., None],
                     np.zeros(values.shape), 1)


def test_formation_rows():
    idx = pd.DatetimeIndex(["2020-01-30", "2020-01-31", "2020-02-03", "2020-02-04", "2020-03-02"])
    assert formation_rows(idx, "monthly", 0).tolist() == [0, 0, 2, 2, 4]
    assert formation_rows(idx, "daily", 1).tolist() == [-1, 0, 1, 2, 3]


def test_sort_monotone_planted():
    T, N = 60, 20
    idx = dates(T)
    b = np.tile(np.arange(N, dtype=float), (T, 1))
    r = 0.001 * b + 0.0001 * np.random.default_rng(12).standard_normal((T, N))
    res = sort_on_beta(_beta_panel(b, idx), pd.DataFrame(r, index=idx, columns=[f"s{i}" for i in range(N)]))
    m = np.nanmean(res.quintile_returns, axis=0)
    assert np.all(np.diff(m) > 0)


def test_sort_equal_betas_tiebreak():
    T, N = 30, 10
    idx = dates(T)
    r = 0.01 + 1e-6 * np.random.default_rng(13).standard_normal((T, N))
    res = sort_on_beta(_beta_panel(np.zeros((T, N)), idx),
                       pd.DataFrame(r, index=idx, columns=[f"s{i}" for i in range(N)]))
    assert res.membership[0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    np.testing.assert_allclose(res.quintile_returns, 0.01, atol=1e-5)


def brute_force_hedge(b, r, rows, w=None):
    T, N = r.shape
    out = np.full(T, np.nan)
    for t in range(T):
        f = rows[t]
        if f < 0:
            continue
        order = sorted(range(N), key=lambda i: (b[f, i], i))
        lo, hi = order[: N // 5], order[-(N // 5):]
        if w is None:
            out[t] = sum(r[t, i] for i in hi) / len(hi) - sum(r[t, i] for i in lo) / len(lo)
        else:
            out[t] = (sum(w[f, i] * r[t, i] for i in hi) / sum(w[f, i] for i in hi)
                      - sum(w[f, i] * r[t, i] for i in lo) / sum(w[f, i] for i in lo))
    return out


@pytest.mark.parametrize("weighting", ["equal", "value"])
def test_hedge_matches_brute_force(weighting):
    rng = np.random.default_rng(14)
    T, N = 90, 20
    idx = dates(T)
    b = rng.standard_normal((T, N))
    r = rng.normal(0, 0.01, (T, N))
    w = rng.uniform(1, 5, (T, N))
    cols = [f"s{i}" for i in range(N)]
    kw = dict(weighting=weighting, sizes=pd.DataFrame(w, index=idx, columns=cols))
    res = sort_on_beta(_beta_panel(b, idx), pd.DataFrame(r, index=idx, columns=cols), "x", **kw)
    oracle = brute_force_hedge(b, r, formation_rows(idx, "monthly", 0), w if weighting == "value" else None)
    np.testing.assert_allclose(res.hedge, oracle, atol=1e-12, rtol=0)
    pres = predictive_sort(_beta_panel(b, idx), pd.DataFrame(r, index=idx, columns=cols), "x", **kw)
    oracle = brute_force_hedge(b, r, formation_rows(idx, "daily", 1), w if weighting == "value" else None)
    np.testing.assert_allclose(pres.hedge, oracle, atol=1e-12, rtol=0, equal_nan=True)


def test_too_few_assets():
    idx = dates(10)
    with pytest.raises(ValueError):
        sort_on_beta(_beta_panel(np.zeros((10, 4)), idx), pd.DataFrame(np.zeros((10, 4)), index=idx,
                                                                        columns=[f"s{i}" for i in range(4)]))


def test_predictive_constant_betas_equal_contemporaneous():
    rng = np.random.default_rng(15)
    T, N = 40, 10
    idx = dates(T)
    b = np.tile(rng.standard_normal(N), (T, 1))
    R = pd.DataFrame(rng.normal(0, 0.01, (T, N)), index=idx, columns=[f"s{i}" for i in range(N)])
    a = sort_on_beta(_beta_panel(b, idx), R, rebalance="daily")
    p = predictive_sort(_beta_panel(b, idx), R)
    np.testing.assert_array_equal(a.quintile_returns[1:], p.quintile_returns[1:])


def test_predictive_null_and_planted():
    rng = np.random.default_rng(16)
    T, N = 1500, 25
    idx = dates(T)
    cols = [f"s{i}" for i in range(N)]
    b = rng.standard_normal((T, N))
    null = predictive_sort(_beta_panel(b, idx), pd.DataFrame(rng.normal(0, 0.01, (T, N)), index=idx, columns=cols))
    h = null.hedge[np.isfinite(null.hedge)]
    assert abs(h.mean()) <= 2 * h.std(ddof=1) / math.sqrt(len(h))
    r = rng.normal(0, 0.01, (T, N))
    r[1:] += 0.002 * b[:-1]
    planted = predictive_sort(_beta_panel(b, idx), pd.DataFrame(r, index=idx, columns=cols))
    assert np.nanmean(planted.hedge) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.integers(5, 60))
def test_sort_invariants(seed, c, cut):
    rng = np.random.default_rng(seed)
    T, N = 60, 15
    idx = dates(T)
    cols = [f"s{i}" for i in range(N)]
    b = rng.standard_normal((T, N))
    r = rng.normal(0, 0.01, (T, N))
    bp = _beta_panel(b, idx)
    base = predictive_sort(bp, pd.DataFrame(r, index=idx, columns=cols))
    scaled = predictive_sort(bp, pd.DataFrame(c * r, index=idx, columns=cols))
    np.testing.assert_allclose(scaled.hedge, c * base.hedge, rtol=1e-12, equal_nan=True)
    r2 = r.copy()
    r2[cut:] = r2[cut:][rng.permutation(T - cut)]
    perm = predictive_sort(bp, pd.DataFrame(r2, index=idx, columns=cols))
    np.testing.assert_array_equal(perm.membership, base.membership)
    for t in range(1, T):
        assert sorted(np.bincount(base.membership[t], minlength=5).tolist()) == [3] * 5


def test_sort_with_ff5_alpha():
    rng = np.random.default_rng(17)
    T, N = 400, 10
    idx = dates(T)
    ff5 = pd.DataFrame(rng.normal(0, 0.01, (T, 5)), index=idx, columns=FF5)
    ff5["rf"] = 0.0
    R = pd.DataFrame(0.0004 + ff5["mkt_rf"].to_numpy()[:, None] + rng.normal(0, 0.001, (T, N)), index=idx,
                     columns=[f"s{i}" for i in range(N)])
    res = sort_on_beta(_beta_panel(rng.standard_normal((T, N)), idx), R, ff5=ff5, alpha_window=100)
    tab = res.table()
    assert list(tab.index) == ["Q1", "Q2", "Q3", "Q4", "Q5", "5-1"]
    np.testing.assert_allclose(tab.loc["Q1":"Q5", "alpha"], 252 * 0.0004, rtol=0.3)
    np.testing.assert_allclose(tab.loc["Q1":"Q5", "b_mkt_rf"], 1.0, atol=0.05)


# ---------------------------------------------------------------- controls


def test_cskew_independent_and_identical():
    rng = np.random.default_rng(18)
    T = 20000
    m = rng.standard_normal(T)
    ri = rng.standard_normal(T)
    cs, _ = conditional_comoments(np.column_stack([ri]), m, window=T)
    assert abs(cs[-1, 0]) < 0.05
    skewed = rng.gamma(2.0, size=T)
    cs, ck = conditional_comoments(skewed[:, None], skewed, window=T)
    from scipy import stats

    assert cs[-1, 0] == pytest.approx(stats.skew(skewed), rel=1e-10)
    assert ck[-1, 0] == pytest.approx(stats.kurtosis(skewed, fisher=False), rel=1e-10)


def test_illiq_constant():
    out = illiquidity(np.full((5, 3), -0.02), np.full((5, 3), 1e6))
    np.testing.assert_allclose(out, 0.02 / 1e6)
    vol = np.full((5, 3), 1e6)
    vol[0, 0] = np.nan
    assert np.isfinite(illiquidity(np.full((5, 3), 0.02), vol)).all()


def test_long_short_uses_previous_day():
    T, N = 10, 10
    char = np.tile(np.arange(N, dtype=float), (T, 1))
    r = np.tile(np.arange(N, dtype=float), (T, 1))
    ls = long_short(char, r, dates(T))
    assert np.isnan(ls[0])
    np.testing.assert_allclose(ls[1:], 8.5 - 0.5)


def test_build_controls(tmp_path):
    rng = np.random.default_rng(19)
    T, N = 120, 10
    idx = dates(T)
    cols = [f"s{i}" for i in range(N)]
    ff5 = pd.DataFrame(rng.normal(0, 0.01, (T, 5)), index=idx, columns=FF5)
    ff5["rf"] = 0.0
    ff5["mom"] = rng.normal(0, 0.01, T)
    path = tmp_path / "ff5.csv"
    ff5.rename_axis("date").reset_index().to_csv(path, index=False)
    assert list(read_ff5(path).columns) == FF5 + ["rf", "mom"]
    R = pd.DataFrame(rng.normal(0, 0.01, (T, N)), index=idx, columns=cols)
    rv = pd.DataFrame(rng.uniform(0.005, 0.02, (T, N)), index=idx, columns=cols)
    vix = pd.Series(rng.uniform(15, 25, T), index=idx)
    res = build_controls(R, path, vix=vix, skew_index=pd.Series(rng.uniform(100, 140, T), index=idx),
                         volume=pd.DataFrame(1e6, index=idx, columns=cols), rv=rv, window=60)
    f = res.frame
    expected = {"MKT", "SMB", "HML", "RMW", "CMA", "MOM", "DVIX", "VRP", "SKIND", "CSKEW", "CKURT", "ILLIQ",
                "IDIOVOL", "IDIOSKEW"}
    assert set(f.columns) == expected
    assert f["DVIX"].iloc[5] == pytest.approx(vix.iloc[5] - vix.iloc[4])
    vrp = (vix.iloc[7] / 100) ** 2 / 252 - rv.iloc[7].mean() ** 2
    assert f["VRP"].iloc[7] == pytest.approx(vrp)
    assert f["CSKEW"].iloc[:60].isna().all() and np.isfinite(f["CSKEW"].iloc[61:]).all()
    res.to_csv(tmp_path / "c.csv")
    assert pd.read_csv(tmp_path / "c.csv").shape == (T, 15)


def test_read_ff5_missing_column(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("date,mkt_rf\n2020-01-02,0.1\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_ff5(p)
