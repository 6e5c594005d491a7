"""Cross-sectional pricing tests and control factors.

Rolling time-series betas, Fama-MacBeth regressions with Newey-West and
Shanken corrections, beta-sorted quintile portfolios with rolling FF5
alphas, and the characteristic-based control factors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .factors import annual_mean, quantile_groups

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
FF5_COLUMNS = ["date", "mkt_rf", "smb", "hml", "rmw", "cma", "rf", "mom"]
FF5_FACTORS = ["mkt_rf", "smb", "hml", "rmw", "cma"]


# ---------------------------------------------------------------------------
# standard errors


def _autocov(x: np.ndarray, lags: int) -> np.ndarray:
    """Autocovariances ``gamma_0..gamma_lags`` (divisor T) of the columns of ``x``."""
    T = x.shape[0]
    xc = x - x.mean(axis=0)
    return np.stack([xc[l:].T @ xc[: T - l] / T for l in range(lags + 1)])


def newey_west(series, lags: int) -> float:
    """Bartlett-kernel HAC variance of the sample mean.

    ``(gamma_0 + 2 sum_{l=1}^{L} (1 - l / (L + 1)) gamma_l) / T`` with
    autocovariances over ``T``; ``lags = 0`` gives ``var(x, ddof=0) / T``.
    """
    x = np.asarray(series, dtype=float)
    x = x[np.isfinite(x)]
    return float(newey_west_cov(x[:, None], lags)[0, 0])


def newey_west_cov(X, lags: int) -> np.ndarray:
    """HAC covariance matrix of the column means of ``X`` (T x K)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = X.shape[0]
    if not 0 <= lags < T:
        raise ValueError(f"lags must be in [0, {T - 1}]")
    g = _autocov(X, lags)
    S = g[0].copy()
    for l in range(1, lags + 1):
        w = 1.0 - l / (lags + 1.0)
        S += w * (g[l] + g[l].T)
    return S / T


def shanken_multiplier(lam, factor_cov) -> float:
    """``1 + lam' Sigma_f^{-1} lam``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    S = np.atleast_2d(np.asarray(factor_cov, dtype=float))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("factor covariance must be positive definite") from None
    z = np.linalg.solve(L, lam)
    return float(1.0 + z @ z)


# ---------------------------------------------------------------------------
# rolling betas


@dataclass
class BetaPanel:
    dates: pd.DatetimeIndex
    asset_ids: list
    factor_names: list
    beta: np.ndarray
    alpha: np.ndarray
    window: int
    se: np.ndarray | None = None
    deficient: np.ndarray | None = None

    def factor(self, name: str) -> pd.DataFrame:
        k = self.factor_names.index(name)
        return pd.DataFrame(self.beta[:, :, k], index=self.dates, columns=self.asset_ids)

    def to_csv(self, path) -> None:
        T, N, K = self.beta.shape
        df = pd.DataFrame(
            {
                "date": np.repeat(self.dates.strftime("%Y-%m-%d"), N),
                "asset": np.tile(self.asset_ids, T),
                "alpha": self.alpha.reshape(-1),
            }
        )
        for k, name in enumerate(self.factor_names):
            df[f"beta_{name}"] = self.beta[:, :, k].reshape(-1)
        df = df[np.isfinite(df["alpha"])]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format="%.12g")

    @classmethod
    def read_csv(cls, path, window: int = 0) -> "BetaPanel":
        df = pd.read_csv(path, dtype={"asset": str})
        names = [c[5:] for c in df.columns if c.startswith("beta_")]
        dates = pd.DatetimeIndex(pd.to_datetime(sorted(df["date"].unique())))
        assets = list(dict.fromkeys(df["asset"]))
        ti = pd.Series(np.arange(len(dates)), index=dates.strftime("%Y-%m-%d"))
        ai = pd.Series(np.arange(len(assets)), index=assets)
        r, c = ti[df["date"]].to_numpy(), ai[df["asset"]].to_numpy()
        beta = np.full((len(dates), len(assets), len(names)), np.nan)
        alpha = np.full((len(dates), len(assets)), np.nan)
        for k, n in enumerate(names):
            beta[r, c, k] = df[f"beta_{n}"].to_numpy()
        alpha[r, c] = df["alpha"].to_numpy()
        return cls(dates, assets, names, beta, alpha, window)


def _as_frame(x, name="") -> pd.DataFrame:
    if isinstance(x, pd.Series):
        x = x.to_frame()
    if hasattr(x, "to_frame") and not isinstance(x, pd.DataFrame):
        x = x.to_frame()
    if not isinstance(x, pd.DataFrame):
        raise TypeError(f"{name}: expected a DataFrame")
    x = x.copy()
    x.index = pd.to_datetime(x.index)
    x.columns = [str(c) for c in x.columns]
    return x


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    c = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
    return c[w:] - c[:-w]


def rolling_betas(returns, factors, window: int = 756, step: int = 1, nw_lags: int = 24,
                  min_obs: int | None = None, se_every: int = 0, chunk: int = 64) -> BetaPanel:
    """Rolling OLS of each asset's return on ``[1, factors]``.

    Betas are stored at the last date of each window; earlier dates are
    missing.  Windows whose factor block is rank deficient, or with fewer
    than ``min_obs`` valid returns, are flagged and left missing.  Newey-West
    standard errors are computed every ``se_every`` windows (0 = never).
    """
    R = _as_frame(returns, "returns")
    F = _as_frame(factors, "factors")
    dates = R.index.intersection(F.index)
    R, F = R.loc[dates], F.loc[dates]
    T, N = R.shape
    K = F.shape[1]
    if window > T:
        raise ValueError(f"window {window} exceeds sample length {T}")
    if window < K + 3:
        raise ValueError("window must be at least the number of regressors + 2")
    min_obs = max(K + 3, int(0.8 * window) if min_obs is None else min_obs)
    f = F.to_numpy(float)
    fvalid = np.isfinite(f).all(axis=1)
    fc = np.where(fvalid[:, None], f - np.nanmean(f[fvalid], axis=0), 0.0)
    X = np.column_stack([np.ones(T), fc])
    y_all = R.to_numpy(float)
    beta = np.full((T, N, K), np.nan)
    alpha = np.full((T, N), np.nan)
    deficient = np.zeros((T, N), dtype=bool)
    se = np.full((T, N, K), np.nan) if se_every else None
    fmean = np.nanmean(f[fvalid], axis=0)
    xx = X[:, :, None] * X[:, None, :]
    gvar = np.nanvar(f[fvalid], axis=0)
    for s0 in range(0, N, chunk):
        y = y_all[:, s0 : s0 + chunk]
        m = np.isfinite(y) & fvalid[:, None]
        ymu = np.array([y[m[:, i], i].mean() if m[:, i].any() else 0.0 for i in range(y.shape[1])])
        yc = np.where(m, y - ymu, 0.0)
        Sxx = _window_sums(m[:, :, None, None] * xx[:, None], window)
        Sxy = _window_sums(X[:, None, :] * yc[:, :, None], window)
        n = Sxx[:, :, 0, 0]
        mean_f = Sxx[:, :, 0, 1:] / np.maximum(n, 1)[..., None]
        cov_f = Sxx[:, :, 1:, 1:] / np.maximum(n, 1)[..., None, None] - mean_f[..., :, None] * mean_f[..., None, :]
        var_f = np.diagonal(cov_f, axis1=-2, axis2=-1)
        bad = (n < min_obs) | np.any(var_f <= 1e-12 * gvar, axis=-1)
        ok = ~bad
        if ok.any():
            sd = np.sqrt(np.where(ok[..., None], var_f, 1.0))
            corr = cov_f / (sd[..., :, None] * sd[..., None, :])
            cond = np.linalg.cond(np.where(ok[..., None, None], corr, np.eye(K)))
            bad |= cond > 1e12
            ok = ~bad
        A = np.where(ok[..., None, None], Sxx, np.eye(K + 1))
        b = np.linalg.solve(A, np.where(ok[..., None], Sxy, 0.0)[..., None])[..., 0]
        rows = slice(window - 1, T)
        bb = np.where(ok[..., None], b, np.nan)
        beta[rows, s0 : s0 + chunk] = bb[..., 1:]
        # undo centering: y - ymu = a + b (f - fmean)
        alpha[rows, s0 : s0 + chunk] = bb[..., 0] + ymu - bb[..., 1:] @ fmean
        deficient[rows, s0 : s0 + chunk] = bad
    if step > 1:
        keep = np.zeros(T, dtype=bool)
        keep[window - 1 :: step] = True
        beta[~keep] = np.nan
        alpha[~keep] = np.nan
    nflag = int(deficient.sum())
    if nflag:
        logger.info("rolling betas: %d asset-windows flagged (rank deficient or sparse)", nflag)
    if se_every:
        Xraw = np.column_stack([np.ones(T), np.where(fvalid[:, None], f, np.nan)])
        for t in range(window - 1, T, se_every):
            sl = slice(t - window + 1, t + 1)
            for i in range(N):
                if not np.isfinite(alpha[t, i]):
                    continue
                yi, Xi = y_all[sl, i], Xraw[sl]
                ok_rows = np.isfinite(yi) & np.isfinite(Xi).all(axis=1)
                cov = ols_hac(Xi[ok_rows], yi[ok_rows], nw_lags)[1]
                se[t, i] = np.sqrt(np.diag(cov))[1:]
    return BetaPanel(dates, list(R.columns), list(F.columns), beta, alpha, window, se, deficient)


def ols_hac(X: np.ndarray, y: np.ndarray, lags: int) -> tuple[np.ndarray, np.ndarray]:
    """OLS coefficients with a Bartlett HAC covariance."""
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ coef
    XtX_inv = np.linalg.inv(X.T @ X)
    g = X * e[:, None]
    T = len(y)
    S = g.T @ g
    for l in range(1, min(lags, T - 1) + 1):
        w = 1.0 - l / (lags + 1.0)
        G = g[l:].T @ g[:-l]
        S += w * (G + G.T)
    return coef, XtX_inv @ S @ XtX_inv


def full_sample_betas(returns, factors) -> pd.DataFrame:
    """Time-series betas over the whole sample (assets x factors)."""
    R = _as_frame(returns, "returns")
    F = _as_frame(factors, "factors")
    dates = R.index.intersection(F.index)
    R, F = R.loc[dates], F.loc[dates]
    X = np.column_stack([np.ones(len(dates)), F.to_numpy(float)])
    out = {}
    for a in R.columns:
        y = R[a].to_numpy(float)
        ok = np.isfinite(y) & np.isfinite(X).all(axis=1)
        coef, *_ = np.linalg.lstsq(X[ok], y[ok], rcond=None)
        out[a] = coef[1:]
    return pd.DataFrame(out, index=list(F.columns)).T


# ---------------------------------------------------------------------------
# Fama-MacBeth


@dataclass
class FmbResult:
    names: list
    lam: np.ndarray
    se_nw: np.ndarray
    t_nw: np.ndarray
    t_shanken: np.ndarray
    shanken: float
    series: pd.DataFrame
    nw_lags: int
    n_skipped: int = 0
    intercept_indeterminate: int = 0

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"lambda": self.lam, "se_nw": self.se_nw, "t_nw": self.t_nw, "t_shanken": self.t_shanken},
            index=self.names,
        )


def fama_macbeth(returns, betas, factors=None, nw_lags: int = 12, beta_lag: int = 0,
                 intercept: bool = True) -> FmbResult:
    """Second-pass cross-sectional regressions and their time-series average.

    ``betas`` is either a static assets x factors frame or a ``BetaPanel``
    (then the betas dated ``t - beta_lag`` explain returns at ``t``).  When
    the design with an intercept is singular but the slopes alone are
    identified (e.g. identical betas), the date is fitted without intercept
    and the intercept is marked indeterminate.  Fully singular dates are
    skipped.  ``factors`` (time series) supply the Shanken covariance.
    """
    R = _as_frame(returns, "returns")
    if isinstance(betas, BetaPanel):
        names = list(betas.factor_names)
        bp = betas
        idx = pd.Series(np.arange(len(bp.dates)), index=bp.dates)
        common = [a for a in R.columns if a in bp.asset_ids]
        cols = [bp.asset_ids.index(a) for a in common]
        R = R[common]

        def beta_at(t_pos, date):
            j = idx.get(date)
            if j is None or j - beta_lag < 0:
                return None
            return bp.beta[j - beta_lag][cols]

    else:
        B = pd.DataFrame(betas)
        B.index = [str(i) for i in B.index]
        names = [str(c) for c in B.columns]
        common = [a for a in R.columns if a in B.index]
        R = R[common]
        Bs = B.loc[common].to_numpy(float)

        def beta_at(t_pos, date):
            return Bs

    K = len(names)
    labels = (["intercept"] if intercept else []) + names
    rows, kept_dates = [], []
    skipped = indeterminate = 0
    for t, date in enumerate(R.index):
        b = beta_at(t, date)
        if b is None:
            continue
        y = R.iloc[t].to_numpy(float)
        ok = np.isfinite(y) & np.isfinite(b).all(axis=1)
        if ok.sum() < K + 2:
            continue
        Xs = b[ok]
        X = np.column_stack([np.ones(ok.sum()), Xs]) if intercept else Xs
        if np.linalg.matrix_rank(X) == X.shape[1]:
            coef, *_ = np.linalg.lstsq(X, y[ok], rcond=None)
        elif intercept and np.linalg.matrix_rank(Xs) == K:
            c, *_ = np.linalg.lstsq(Xs, y[ok], rcond=None)
            coef = np.r_[np.nan, c]
            indeterminate += 1
        else:
            skipped += 1
            logger.info("fama-macbeth: singular design on %s, date skipped", date)
            continue
        rows.append(coef)
        kept_dates.append(date)
    if not rows:
        raise ValueError("no usable cross-sections")
    if indeterminate:
        logger.warning("fama-macbeth: intercept indeterminate on %d dates (collinear betas)", indeterminate)
    series = pd.DataFrame(np.array(rows), index=pd.DatetimeIndex(kept_dates), columns=labels)
    lam = series.mean().to_numpy()
    se = np.array([math.sqrt(newey_west(series[c].to_numpy(), nw_lags)) if series[c].notna().sum() > nw_lags
                   else np.nan for c in labels])
    slope = slice(1, None) if intercept else slice(None)
    c = 1.0
    if factors is not None:
        Fr = _as_frame(factors, "factors")[names].dropna()
        c = shanken_multiplier(lam[slope], np.atleast_2d(np.cov(Fr.to_numpy(float), rowvar=False)))
    t_nw = lam / se
    return FmbResult(labels, lam, se, t_nw, lam / (se * math.sqrt(c)), c, series, nw_lags, skipped, indeterminate)


# ---------------------------------------------------------------------------
# portfolio sorts


@dataclass
class SortResult:
    dates: pd.DatetimeIndex
    quintile_returns: np.ndarray
    hedge: np.ndarray
    membership: np.ndarray
    annual: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.full(6, np.nan))
    alpha_t: np.ndarray = field(default_factory=lambda: np.full(6, np.nan))
    ff5_betas: np.ndarray | None = None
    hedge_t: float = float("nan")

    def table(self) -> pd.DataFrame:
        idx = ["Q1", "Q2", "Q3", "Q4", "Q5", "5-1"]
        df = pd.DataFrame({"R_p": self.annual, "alpha": self.alpha, "alpha_t": self.alpha_t}, index=idx)
        if self.ff5_betas is not None:
            for k, n in enumerate(FF5_FACTORS):
                df[f"b_{n}"] = self.ff5_betas[:, k]
        return df


def formation_rows(dates: pd.DatetimeIndex, rebalance: str, lag: int) -> np.ndarray:
    """For each return date, the row whose characteristics form the portfolio (-1 if none)."""
    T = len(dates)
    pos = np.arange(T)
    if rebalance == "monthly":
        month = np.asarray(dates.year * 12 + dates.month)
        first = np.r_[True, month[1:] != month[:-1]]
        pos = np.maximum.accumulate(np.where(first, pos, 0))
    elif rebalance != "daily":
        raise ValueError("rebalance must be 'daily' or 'monthly'")
    src = pos - lag
    return np.where(src >= 0, src, -1)


def _rolling_alpha(port: np.ndarray, ff5: np.ndarray, dates: pd.DatetimeIndex, window: int = 252):
    """Alphas and FF5 loadings from 1-year regressions at each month end."""
    month = np.asarray(dates.year * 12 + dates.month)
    ends = np.nonzero(np.r_[month[1:] != month[:-1], True])[0]
    alphas, betas = [], []
    for e in ends:
        if e + 1 < window:
            continue
        sl = slice(e + 1 - window, e + 1)
        y, F = port[sl], ff5[sl]
        ok = np.isfinite(y) & np.isfinite(F).all(axis=1)
        if ok.sum() < F.shape[1] + 10:
            continue
        X = np.column_stack([np.ones(ok.sum()), F[ok]])
        coef, *_ = np.linalg.lstsq(X, y[ok], rcond=None)
        alphas.append(coef[0])
        betas.append(coef[1:])
    return np.array(alphas), np.array(betas)


def _sort_result(Q, member, dates, ff5, nw_lags, alpha_window) -> SortResult:
    hedge = Q[:, 4] - Q[:, 0]
    P = np.column_stack([Q, hedge])
    annual = np.array([annual_mean(P[:, i], dates) for i in range(6)])
    ok = np.isfinite(hedge)
    hedge_t = float("nan")
    if ok.sum() > nw_lags + 1:
        hedge_t = float(np.nanmean(hedge) / math.sqrt(newey_west(hedge[ok], nw_lags)))
    res = SortResult(dates, Q, hedge, member, annual, hedge_t=hedge_t)
    if ff5 is not None:
        F = _as_frame(ff5, "ff5").reindex(dates)
        fx = F[FF5_FACTORS].to_numpy(float)
        rf = F["rf"].to_numpy(float) if "rf" in F.columns else np.zeros(len(dates))
        alpha, at, bet = np.full(6, np.nan), np.full(6, np.nan), np.full((6, len(FF5_FACTORS)), np.nan)
        for i in range(6):
            y = P[:, i] - (rf if i < 5 else 0.0)
            a, b = _rolling_alpha(y, fx, dates, alpha_window)
            if len(a) == 0:
                continue
            alpha[i] = TRADING_DAYS * a.mean()
            bet[i] = b.mean(axis=0)
            if len(a) > 2:
                lags = min(12, len(a) - 2)
                at[i] = a.mean() / math.sqrt(newey_west(a, lags)) if np.ptp(a) > 0 else np.nan
        res.alpha, res.alpha_t, res.ff5_betas = alpha, at, bet
    return res


def _beta_frame(beta_panel, factor_key):
    if isinstance(beta_panel, BetaPanel):
        if not factor_key and len(beta_panel.factor_names) == 1:
            factor_key = beta_panel.factor_names[0]
        return beta_panel.factor(factor_key)
    return _as_frame(beta_panel, "betas")


def sort_on_beta(beta_panel, returns, factor_key: str = "", weighting: str = "equal", sizes=None,
                 rebalance: str = "monthly", ff5=None, nw_lags: int = 12, alpha_window: int = 252,
                 lag: int = 0) -> SortResult:
    """Quintile portfolios on betas; Q5 holds the highest betas, hedge = Q5 - Q1."""
    Bf = _beta_frame(beta_panel, factor_key)
    R = _as_frame(returns, "returns")
    dates = R.index.intersection(Bf.index)
    assets = [a for a in R.columns if a in Bf.columns]
    if len(assets) < 5:
        raise ValueError("need at least 5 assets for quintile sorts")
    R, Bf = R.loc[dates, assets], Bf.loc[dates, assets]
    W = None
    if weighting == "value":
        if sizes is None:
            raise ValueError("value weighting needs sizes")
        W = _as_frame(sizes, "sizes").reindex(index=dates, columns=assets).to_numpy(float)
    Q, member = _sort_panel(Bf.to_numpy(float), R.to_numpy(float), dates, rebalance, lag, W)
    return _sort_result(Q, member, dates, ff5, nw_lags, alpha_window)


def _sort_panel(C, Rr, dates, rebalance, lag, W, n_groups=5):
    T, N = Rr.shape
    src = formation_rows(dates, rebalance, lag)
    out = np.full((T, n_groups), np.nan)
    member = np.full((T, N), -1)
    cache: dict[int, np.ndarray] = {}
    for t in range(T):
        f = src[t]
        if f < 0:
            continue
        if f not in cache:
            ok = np.isfinite(C[f])
            g = np.full(N, -1)
            if ok.sum() >= n_groups:
                g[ok] = quantile_groups(C[f, ok], n_groups)
            cache[f] = g
        g = cache[f]
        member[t] = g
        for q in range(n_groups):
            m = (g == q) & np.isfinite(Rr[t])
            if not m.any():
                continue
            w = np.ones(m.sum()) if W is None else W[f, m]
            out[t, q] = np.dot(w, Rr[t, m]) / w.sum()
    return out, member


def predictive_sort(beta_panel, returns, factor_key: str = "", weighting: str = "equal", sizes=None,
                    ff5=None, nw_lags: int = 12, alpha_window: int = 252) -> SortResult:
    """Daily quintile sorts on the previous day's betas (no look-ahead)."""
    return sort_on_beta(beta_panel, returns, factor_key, weighting, sizes, "daily", ff5, nw_lags, alpha_window, lag=1)


def long_short(char, returns, dates, n_groups: int = 5) -> np.ndarray:
    """Daily top-minus-bottom group return, sorted on the previous day's characteristic."""
    Q, _ = _sort_panel(np.asarray(char, float), np.asarray(returns, float), dates, "daily", 1, None, n_groups)
    return Q[:, -1] - Q[:, 0]


# ---------------------------------------------------------------------------
# control factors


def read_ff5(path) -> pd.DataFrame:
    """FF5 + momentum file with columns date, mkt_rf, smb, hml, rmw, cma, rf, mom."""
    df = pd.read_csv(path)
    df.columns = [c.strip().lower() for c in df.columns]
    missing = [c for c in FF5_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    df["date"] = pd.to_datetime(df["date"])
    out = df.set_index("date")[FF5_COLUMNS[1:]].astype(float).sort_index()
    if out.index.has_duplicates:
        raise ValueError(f"{path}: duplicate dates")
    return out


def conditional_comoments(r: np.ndarray, m: np.ndarray, window: int = 252) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window CSKEW and CKURT of each asset against the market.

    CSKEW = E[(R - mu)(M - mu_M)^2] / (sd(R) var(M)),
    CKURT = E[(R - mu)(M - mu_M)^3] / (sd(R) var(M)^{3/2}); population moments.
    Value at row t uses rows t - window + 1..t.
    """
    r = np.asarray(r, dtype=float)
    m = np.asarray(m, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    T, N = r.shape
    cs = np.full((T, N), np.nan)
    ck = np.full((T, N), np.nan)
    if T < window:
        return cs, ck
    Mw = sliding_window_view(m, window)
    Mc = Mw - Mw.mean(axis=1, keepdims=True)
    vm = (Mc**2).mean(axis=1)
    for i in range(N):
        Rw = sliding_window_view(r[:, i], window)
        Rc = Rw - Rw.mean(axis=1, keepdims=True)
        sd = np.sqrt((Rc**2).mean(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            cs[window - 1 :, i] = (Rc * Mc**2).mean(axis=1) / (sd * vm)
            ck[window - 1 :, i] = (Rc * Mc**3).mean(axis=1) / (sd * vm**1.5)
    return cs, ck


def illiquidity(returns, volume) -> np.ndarray:
    """Cross-sectional mean of ``|R| / volume``; missing or zero volume is excluded."""
    r = np.abs(np.asarray(returns, dtype=float))
    v = np.asarray(volume, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(np.isfinite(v) & (v > 0), r / v, np.nan)
    out = np.full(x.shape[0], np.nan)
    ok = np.isfinite(x).any(axis=1)
    out[ok] = np.nanmean(x[ok], axis=1)
    return out


def idiosyncratic_moments(returns: np.ndarray, ff5: np.ndarray, window: int = 252) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window sd and skewness of FF5 regression residuals per asset."""
    r = np.asarray(returns, dtype=float)
    F = np.asarray(ff5, dtype=float)
    T, N = r.shape
    vol = np.full((T, N), np.nan)
    skw = np.full((T, N), np.nan)
    if T < window:
        return vol, skw
    X = np.column_stack([np.ones(T), F])
    Xw = np.moveaxis(sliding_window_view(X, window, axis=0), -1, 1)
    XtX = np.einsum("twk,twl->tkl", Xw, Xw)
    XtX_inv = np.linalg.inv(XtX)
    for i in range(N):
        Yw = sliding_window_view(r[:, i], window)
        if not np.isfinite(Yw).all():
            ok_rows = np.isfinite(Yw).all(axis=1)
        else:
            ok_rows = np.ones(len(Yw), dtype=bool)
        coef = np.einsum("tkl,twl,tw->tk", XtX_inv, Xw, np.nan_to_num(Yw))
        e = np.nan_to_num(Yw) - np.einsum("twk,tk->tw", Xw, coef)
        sd = e.std(axis=1, ddof=X.shape[1])
        with np.errstate(invalid="ignore", divide="ignore"):
            sk = stats.skew(e, axis=1, bias=False)
        sd[~ok_rows] = np.nan
        sk[~ok_rows] = np.nan
        vol[window - 1 :, i] = sd
        skw[window - 1 :, i] = sk
    return vol, skw


@dataclass
class ControlFactors:
    frame: pd.DataFrame
    characteristics: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        df = self.frame.copy()
        df.index = df.index.strftime("%Y-%m-%d")
        df.index.name = "date"
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, float_format="%.12g")


def build_controls(returns, ff5, vix=None, skew_index=None, volume=None, rv=None, sizes=None,
                   market=None, window: int = 252) -> ControlFactors:
    """Daily control factor series aligned on the returns calendar.

    ``market`` defaults to ``mkt_rf`` from the FF5 file.  VRP is
    ``(VIX/100)^2 / 252`` minus the squared size-weighted daily realized
    volatility (equal-weighted without ``sizes``).
    """
    R = _as_frame(returns, "returns")
    dates = R.index
    F = read_ff5(ff5) if isinstance(ff5, (str, Path)) else _as_frame(ff5, "ff5")
    F = F.reindex(dates)
    out = pd.DataFrame(index=dates)
    for name, col in (("MKT", "mkt_rf"), ("SMB", "smb"), ("HML", "hml"), ("RMW", "rmw"), ("CMA", "cma"),
                      ("MOM", "mom")):
        if col in F.columns:
            out[name] = F[col]
    r = R.to_numpy(float)
    mkt = F["mkt_rf"].to_numpy(float) if market is None else pd.Series(market).reindex(dates).to_numpy(float)
    chars = {}
    if vix is not None:
        v = pd.Series(vix)
        v.index = pd.to_datetime(v.index)
        v = v.reindex(dates)
        out["DVIX"] = v.diff()
        if rv is not None:
            rvp = _as_frame(rv, "rv").reindex(index=dates, columns=R.columns).to_numpy(float)
            if sizes is not None:
                w = _as_frame(sizes, "sizes").reindex(index=dates, columns=R.columns).to_numpy(float)
            else:
                w = np.ones_like(rvp)
            w = np.where(np.isfinite(rvp), w, 0.0)
            mrv = np.nansum(w * np.nan_to_num(rvp), axis=1) / w.sum(axis=1)
            out["VRP"] = (v.to_numpy() / 100.0) ** 2 / TRADING_DAYS - mrv**2
    if skew_index is not None:
        s = pd.Series(skew_index)
        s.index = pd.to_datetime(s.index)
        out["SKIND"] = s.reindex(dates).pct_change(fill_method=None)
    cs, ck = conditional_comoments(r, mkt, window)
    chars["CSKEW"], chars["CKURT"] = cs, ck
    out["CSKEW"] = long_short(cs, r, dates)
    out["CKURT"] = long_short(ck, r, dates)
    if volume is not None:
        vol_frame = _as_frame(volume, "volume").reindex(index=dates, columns=R.columns)
        out["ILLIQ"] = illiquidity(r, vol_frame.to_numpy(float))
    if all(c in F.columns for c in FF5_FACTORS):
        fx = F[FF5_FACTORS].to_numpy(float)
        if np.isfinite(fx).all():
            iv, isk = idiosyncratic_moments(r, fx, window)
            chars["IDIOVOL"], chars["IDIOSKEW"] = iv, isk
            out["IDIOVOL"] = long_short(iv, r, dates)
            out["IDIOSKEW"] = long_short(isk, r, dates)
    return ControlFactors(out, chars)
