"""Directional network-risk factors from size x net-connectedness sorts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

TRADING_DAYS = 252


@dataclass(frozen=True)
class SortSpec:
    """Sorting rules.

    ``conn_grid="tails"`` gives three connectedness groups (below ``low``,
    middle, above ``high``); ``"quintile"`` gives five.  ``lag`` is the
    number of days between the characteristics used for formation and the
    return being measured.
    """

    size_split: float = 50.0
    conn_percentiles: tuple = (30.0, 70.0)
    weighting: str = "value"
    rebalance: str = "daily"
    size_groups: int = 2
    conn_grid: str = "tails"
    lag: int = 1

    def __post_init__(self):
        low, high = self.conn_percentiles
        if not 0 < low < high < 100:
            raise ValueError("conn_percentiles must satisfy 0 < low < high < 100")
        if not 0 < self.size_split < 100:
            raise ValueError("size_split must be in (0, 100)")
        if self.weighting not in ("value", "equal"):
            raise ValueError("weighting must be 'value' or 'equal'")
        if self.rebalance not in ("daily", "monthly"):
            raise ValueError("rebalance must be 'daily' or 'monthly'")
        if self.size_groups not in (2, 5):
            raise ValueError("size_groups must be 2 or 5")
        if self.conn_grid not in ("tails", "quintile"):
            raise ValueError("conn_grid must be 'tails' or 'quintile'")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")


# ---------------------------------------------------------------------------
# group assignment


def stable_ranks(values: np.ndarray) -> np.ndarray:
    """0-based ranks; ties keep the input (asset-id) order."""
    order = np.argsort(values, kind="stable")
    r = np.empty(len(values), dtype=int)
    r[order] = np.arange(len(values))
    return r


def quantile_groups(values: np.ndarray, n_groups: int) -> np.ndarray:
    """Equal-count groups ``0..n_groups-1`` by stable rank."""
    n = len(values)
    return (stable_ranks(values) * n_groups) // n


def tail_groups(values: np.ndarray, low: float, high: float) -> np.ndarray:
    """0 for ranks at or below the nearest-rank ``low`` percentile, 2 above ``high``, else 1."""
    n = len(values)
    r1 = stable_ranks(values) + 1
    g = np.ones(n, dtype=int)
    g[r1 <= math.ceil(low * n / 100.0)] = 0
    g[r1 > math.floor(high * n / 100.0)] = 2
    return g


def split_groups(values: np.ndarray, pct: float) -> np.ndarray:
    """0 (small) for ranks at or below the nearest-rank ``pct`` percentile, else 1."""
    n = len(values)
    r1 = stable_ranks(values) + 1
    return (r1 > math.ceil(pct * n / 100.0)).astype(int)


def assign_cells(sizes: np.ndarray, conn: np.ndarray, spec: SortSpec) -> tuple[np.ndarray, np.ndarray]:
    """Size group and conditional connectedness group for one day's cross-section."""
    sizes = np.asarray(sizes, dtype=float)
    conn = np.asarray(conn, dtype=float)
    sg = split_groups(sizes, spec.size_split) if spec.size_groups == 2 else quantile_groups(sizes, 5)
    cg = np.empty(len(conn), dtype=int)
    for s in np.unique(sg):
        idx = np.nonzero(sg == s)[0]
        if spec.conn_grid == "tails":
            cg[idx] = tail_groups(conn[idx], *spec.conn_percentiles)
        else:
            cg[idx] = quantile_groups(conn[idx], 5)
    return sg, cg


# ---------------------------------------------------------------------------
# double sort


def _frame(x, name) -> pd.DataFrame:
    if isinstance(x, pd.DataFrame):
        df = x.copy()
    elif hasattr(x, "to_frame"):
        df = x.to_frame()
    else:
        raise TypeError(f"{name}: expected a DataFrame or panel")
    df.index = pd.to_datetime(df.index)
    df.columns = [str(c) for c in df.columns]
    return df


def align_inputs(returns, sizes, net_conn):
    """Common dates and assets of the three inputs."""
    R, S, C = _frame(returns, "returns"), _frame(sizes, "sizes"), _frame(net_conn, "net_conn")
    dates = R.index.intersection(S.index).intersection(C.index)
    assets = [a for a in R.columns if a in S.columns and a in C.columns]
    if len(dates) == 0 or len(assets) == 0:
        raise ValueError("inputs share no dates or assets")
    return R.loc[dates, assets], S.loc[dates, assets], C.loc[dates, assets]


@dataclass
class DoubleSortResult:
    dates: pd.DatetimeIndex
    asset_ids: list
    cell_returns: np.ndarray
    size_group: np.ndarray
    conn_group: np.ndarray
    spec: SortSpec

    @property
    def n_conn(self) -> int:
        return self.cell_returns.shape[2]

    def annual_table(self) -> pd.DataFrame:
        """Average annual return per cell (daily returns summed within each year)."""
        rows = {}
        for s in range(self.cell_returns.shape[1]):
            rows[s] = [annual_mean(self.cell_returns[:, s, c], self.dates) for c in range(self.n_conn)]
        return pd.DataFrame.from_dict(rows, orient="index")


def annual_mean(daily: np.ndarray, dates) -> float:
    """Mean over calendar years of the within-year sum of daily returns (missing days skipped)."""
    s = pd.Series(np.asarray(daily, dtype=float), index=pd.DatetimeIndex(dates))
    s = s.dropna()
    if s.empty:
        return float("nan")
    return float(s.groupby(s.index.year).sum().mean())


def _formation_rows(dates: pd.DatetimeIndex, spec: SortSpec) -> np.ndarray:
    """Row index of the characteristics used for each return row (-1 if none)."""
    T = len(dates)
    src = np.arange(T) - spec.lag
    if spec.rebalance == "monthly":
        month = dates.year * 12 + dates.month
        first = np.r_[True, month[1:] != month[:-1]]
        last_first = np.maximum.accumulate(np.where(first, np.arange(T), 0))
        src = last_first - spec.lag
    return np.where(src >= 0, src, -1)


def double_sort(returns, sizes, net_conn, spec: SortSpec | None = None) -> DoubleSortResult:
    """Daily returns of size x net-connectedness portfolios.

    Cells are formed from ``sizes`` and ``net_conn`` ``spec.lag`` days before
    the return date.  Empty cells give a missing return for that day.
    """
    spec = spec or SortSpec()
    R, S, C = align_inputs(returns, sizes, net_conn)
    T, N = R.shape
    r, s, c = R.to_numpy(float), S.to_numpy(float), C.to_numpy(float)
    n_size = spec.size_groups
    n_conn = 3 if spec.conn_grid == "tails" else 5
    out = np.full((T, n_size, n_conn), np.nan)
    sg_all = np.full((T, N), -1)
    cg_all = np.full((T, N), -1)
    src = _formation_rows(R.index, spec)
    n_empty = 0
    for t in range(T):
        f = src[t]
        if f < 0:
            continue
        ok = np.isfinite(s[f]) & np.isfinite(c[f]) & np.isfinite(r[t])
        idx = np.nonzero(ok)[0]
        if len(idx) < n_size:
            continue
        sg, cg = assign_cells(s[f, idx], c[f, idx], spec)
        sg_all[t, idx], cg_all[t, idx] = sg, cg
        w = s[f, idx] if spec.weighting == "value" else np.ones(len(idx))
        for a in range(n_size):
            for b in range(n_conn):
                m = (sg == a) & (cg == b)
                if not m.any():
                    n_empty += 1
                    continue
                out[t, a, b] = np.dot(w[m], r[t, idx[m]]) / w[m].sum()
    if n_empty:
        logger.info("double sort: %d empty cell-days recorded as missing", n_empty)
    return DoubleSortResult(R.index, list(R.columns), out, sg_all, cg_all, spec)


# ---------------------------------------------------------------------------
# factors


@dataclass
class FactorLegs:
    dates: pd.DatetimeIndex
    from_small: np.ndarray
    to_small: np.ndarray
    from_big: np.ndarray
    to_big: np.ndarray
    band: str = ""

    @classmethod
    def from_sort(cls, res: DoubleSortResult, band: str = "") -> "FactorLegs":
        if res.spec.size_groups != 2 or res.spec.conn_grid != "tails":
            raise ValueError("factor legs need the 2 x tails grid")
        cr = res.cell_returns
        return cls(res.dates, cr[:, 0, 0], cr[:, 0, 2], cr[:, 1, 0], cr[:, 1, 2], band)


@dataclass
class FactorSeries:
    dates: pd.DatetimeIndex
    values: np.ndarray
    variant: str
    band: str = ""
    legs: FactorLegs | None = None

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.dates, name=f"{self.variant}_{self.band}")

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "date": self.dates.strftime("%Y-%m-%d"),
                "band": self.band,
                "variant": self.variant,
                "factor": self.values,
            }
        )
        for leg in ("from_small", "to_small", "from_big", "to_big"):
            df[leg] = getattr(self.legs, leg) if self.legs is not None else np.nan
        return df


def _combine(legs: FactorLegs, values: np.ndarray, variant: str) -> FactorSeries:
    ok = np.isfinite(values)
    if not ok.all():
        logger.info("%s(%s): %d days skipped for missing legs", variant, legs.band, int((~ok).sum()))
    kept = FactorLegs(
        legs.dates[ok], legs.from_small[ok], legs.to_small[ok], legs.from_big[ok], legs.to_big[ok], legs.band
    )
    return FactorSeries(legs.dates[ok], values[ok], variant, legs.band, kept)


def net_factor(legs: FactorLegs) -> FactorSeries:
    """Average of small TO and FROM portfolios minus the same average for big stocks."""
    v = (legs.from_small + legs.to_small) / 2 - (legs.from_big + legs.to_big) / 2
    return _combine(legs, v, "NET")


def net_factor_alt(legs: FactorLegs) -> FactorSeries:
    """TO minus FROM among small stocks, less TO minus FROM among big stocks."""
    v = (legs.to_small - legs.from_small) - (legs.to_big - legs.from_big)
    return _combine(legs, v, "NET_PRIME")


def orthogonalize(short: FactorSeries, long: FactorSeries) -> FactorSeries:
    """Residuals of ``short = a + b long + e`` on common dates."""
    common = short.dates.intersection(long.dates)
    ys = pd.Series(short.values, index=short.dates).loc[common].to_numpy()
    xl = pd.Series(long.values, index=long.dates).loc[common].to_numpy()
    if len(common) < 3 or np.ptp(xl) == 0:
        raise ValueError("long factor is degenerate (zero variance)")
    X = np.column_stack([np.ones(len(xl)), xl])
    coef, *_ = np.linalg.lstsq(X, ys, rcond=None)
    return FactorSeries(common, ys - X @ coef, "NET_ORTH", short.band)


def factor_stats(factors) -> dict:
    """Annualized mean and sd, skewness, kurtosis (non-excess) and cross-factor moments.

    ``factors`` maps names to ``FactorSeries`` or ``pandas.Series``.
    """
    if isinstance(factors, (FactorSeries, pd.Series)):
        factors = {getattr(factors, "name", None) or "factor": factors}
    cols = {k: (v.to_series() if isinstance(v, FactorSeries) else pd.Series(v)) for k, v in factors.items()}
    df = pd.DataFrame(cols)
    rows = {}
    for name in df.columns:
        x = df[name].dropna().to_numpy(float)
        if len(x) < 2:
            raise ValueError(f"{name}: need at least 2 observations")
        if np.ptp(x) == 0:
            sd, sk, ku = 0.0, float("nan"), float("nan")
        else:
            sd = x.std(ddof=1)
            sk = float(stats.skew(x, bias=False))
            ku = float(stats.kurtosis(x, fisher=False, bias=False))
        rows[name] = {
            "mean": TRADING_DAYS * x.mean(),
            "sd": math.sqrt(TRADING_DAYS) * sd,
            "skew": sk,
            "kurt": ku,
            "n": len(x),
        }
    return {"summary": pd.DataFrame(rows).T, "corr": df.corr(), "cov": df.cov()}


def factors_to_csv(series: list[FactorSeries], path) -> None:
    df = pd.concat([s.to_frame() for s in series], ignore_index=True)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.12g")


def read_factors_csv(path) -> pd.DataFrame:
    """Wide frame of factor returns indexed by date, one column per ``variant_band``."""
    df = pd.read_csv(path)
    df["key"] = df["variant"] + "_" + df["band"].astype(str)
    wide = df.pivot(index="date", columns="key", values="factor")
    wide.index = pd.to_datetime(wide.index)
    return wide.sort_index()
