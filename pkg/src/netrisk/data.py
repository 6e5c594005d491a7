"""Intraday price ingestion, daily returns and realized volatility.

Prices are held on a regular intraday grid per (day, asset).  Daily returns
are the telescoping sum of intraday log-price increments and realized
volatility is the square root of the summed squared increments.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

AlignPolicy = Literal["drop-asset", "drop-date", "require-full"]

DEFAULT_COLUMNS = {"date": "date", "time": "time", "asset": "asset", "price": "price"}


class IngestError(ValueError):
    """Malformed intraday input."""


class AlignmentError(ValueError):
    """No balanced panel can be formed."""


def _as_dates(days: Iterable) -> list[dt.date]:
    out = []
    for d in days:
        if isinstance(d, dt.datetime):
            out.append(d.date())
        elif isinstance(d, dt.date):
            out.append(d)
        else:
            out.append(pd.Timestamp(d).date())
    return out


def _check_dates_assets(days: Sequence[dt.date], asset_ids: Sequence[str]) -> None:
    if len(set(asset_ids)) != len(asset_ids):
        raise ValueError("duplicate asset ids")
    for a, b in zip(days[:-1], days[1:]):
        if not a < b:
            raise ValueError(f"dates must be strictly increasing ({a} >= {b})")


@dataclass
class PricePanel:
    """Intraday log prices on a regular grid.

    ``prices`` has shape ``(n_days, n_assets, D + 1)``.  ``excluded`` marks
    (day, asset) cells flagged during ingestion; their prices are NaN.
    """

    asset_ids: list[str]
    days: list[dt.date]
    prices: np.ndarray
    excluded: np.ndarray | None = None
    sizes: np.ndarray | None = None

    def __post_init__(self):
        self.asset_ids = [str(a) for a in self.asset_ids]
        self.days = _as_dates(self.days)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.prices.ndim != 3:
            raise ValueError("prices must be (days, assets, grid)")
        T, N, G = self.prices.shape
        if T != len(self.days) or N != len(self.asset_ids):
            raise ValueError("prices shape does not match days/assets")
        if G < 2:
            raise ValueError("intraday grid needs at least two points")
        _check_dates_assets(self.days, self.asset_ids)
        if self.excluded is None:
            self.excluded = ~np.isfinite(self.prices).all(axis=2)
        else:
            self.excluded = np.asarray(self.excluded, dtype=bool)
            if self.excluded.shape != (T, N):
                raise ValueError("excluded mask must be (days, assets)")

    @property
    def D(self) -> int:
        """Number of intraday intervals."""
        return self.prices.shape[2] - 1

    def _increments(self) -> np.ndarray:
        inc = np.diff(self.prices, axis=2)
        inc[self.excluded] = np.nan
        return inc


@dataclass
class ReturnPanel:
    dates: list[dt.date]
    asset_ids: list[str]
    returns: np.ndarray

    def __post_init__(self):
        self.dates = _as_dates(self.dates)
        self.asset_ids = [str(a) for a in self.asset_ids]
        self.returns = np.asarray(self.returns, dtype=float)

    def to_frame(self) -> pd.DataFrame:
        return _wide_frame(self.dates, self.asset_ids, self.returns)

    def to_csv(self, path) -> None:
        _write_wide(path, self.dates, self.asset_ids, self.returns)

    @classmethod
    def read_csv(cls, path) -> "ReturnPanel":
        dates, assets, values = _read_wide(path)
        return cls(dates, assets, values)


@dataclass
class VolatilityPanel:
    dates: list[dt.date]
    asset_ids: list[str]
    rv: np.ndarray

    def __post_init__(self):
        self.dates = _as_dates(self.dates)
        self.asset_ids = [str(a) for a in self.asset_ids]
        self.rv = np.asarray(self.rv, dtype=float)
        if self.rv.shape != (len(self.dates), len(self.asset_ids)):
            raise ValueError("rv must be (dates, assets)")
        finite = self.rv[np.isfinite(self.rv)]
        if np.any(finite < 0):
            raise ValueError("realized volatility must be nonnegative")

    @property
    def values(self) -> np.ndarray:
        return self.rv

    def to_frame(self) -> pd.DataFrame:
        return _wide_frame(self.dates, self.asset_ids, self.rv)

    def to_csv(self, path) -> None:
        _write_wide(path, self.dates, self.asset_ids, self.rv)

    @classmethod
    def read_csv(cls, path) -> "VolatilityPanel":
        dates, assets, values = _read_wide(path)
        return cls(dates, assets, values)


@dataclass
class PanelAlignment:
    kept_assets: list[str]
    kept_dates: list[dt.date]
    dropped: np.ndarray
    policy: str = "require-full"
    dropped_assets: list[str] = field(default_factory=list)
    dropped_dates: list[dt.date] = field(default_factory=list)


def _wide_frame(dates, assets, values) -> pd.DataFrame:
    df = pd.DataFrame(values, columns=list(assets))
    df.insert(0, "date", [d.isoformat() for d in dates])
    return df


def _write_wide(path, dates, assets, values) -> None:
    _wide_frame(dates, assets, values).to_csv(path, index=False, float_format="%.17g")


def _read_wide(path):
    df = pd.read_csv(path)
    if df.columns[0] != "date":
        raise IngestError(f"{path}: first column must be 'date'")
    dates = [dt.date.fromisoformat(str(d)) for d in df["date"]]
    assets = [str(c) for c in df.columns[1:]]
    return dates, assets, df.iloc[:, 1:].to_numpy(dtype=float)


def _parse_time(value: str) -> int:
    """Seconds since midnight for HH:MM or HH:MM:SS."""
    parts = value.strip().split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"bad time {value!r}")
    h, m = int(parts[0]), int(parts[1])
    s = float(parts[2]) if len(parts) == 3 else 0.0
    if not (0 <= h < 24 and 0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"bad time {value!r}")
    return int(round(h * 3600 + m * 60 + s))


def ingest_intraday(
    source,
    columns: dict[str, str] | None = None,
    grid_minutes: float = 5.0,
    session: tuple[str, str] | None = None,
    log_prices: bool = True,
    max_missing: float = 0.2,
) -> PricePanel:
    """Read a long-format intraday CSV into a regular-grid :class:`PricePanel`.

    Parameters
    ----------
    source : path or file-like
        UTF-8 CSV with a header row holding date, time, asset and price columns.
    columns : dict, optional
        Maps the logical names ``date``, ``time``, ``asset``, ``price`` to the
        file's column names.
    grid_minutes : float
        Grid spacing. Timestamps are snapped to the nearest grid point; when
        several observations hit the same point the last one in file order wins.
    session : (open, close), optional
        Grid bounds as ``"HH:MM"``. Inferred from the earliest and latest
        observed time of day when omitted.
    log_prices : bool
        Convert raw prices to natural logs.
    max_missing : float
        A (day, asset) cell with more than this fraction of empty grid points
        is flagged in ``excluded``. Smaller gaps are filled with the previous
        observation (the next one for leading gaps).
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    step = int(round(grid_minutes * 60))
    if step <= 0:
        raise ValueError("grid_minutes must be positive")

    records: list[tuple[dt.date, int, str, float]] = []
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        missing = [c for c in cols.values() if reader.fieldnames is None or c not in reader.fieldnames]
        if missing:
            raise IngestError(f"missing columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                day = dt.date.fromisoformat(row[cols["date"]].strip())
                secs = _parse_time(row[cols["time"]])
                asset = row[cols["asset"]].strip()
                price = float(row[cols["price"]])
            except (ValueError, TypeError, AttributeError) as exc:
                raise IngestError(f"line {lineno}: cannot parse row {row!r} ({exc})") from None
            if not np.isfinite(price) or price <= 0:
                raise IngestError(f"line {lineno}: price must be positive, got {price!r}")
            if not asset:
                raise IngestError(f"line {lineno}: empty asset id")
            records.append((day, secs, asset, price))
    finally:
        if fh is not source:
            fh.close()
    if not records:
        raise IngestError("no rows")

    if session is None:
        open_s = min(r[1] for r in records)
        close_s = max(r[1] for r in records)
    else:
        open_s, close_s = _parse_time(session[0]), _parse_time(session[1])
    n_grid = int(round((close_s - open_s) / step)) + 1
    if n_grid < 2:
        raise IngestError("session spans fewer than two grid points")

    days = sorted({r[0] for r in records})
    assets = sorted({r[2] for r in records})
    day_ix = {d: i for i, d in enumerate(days)}
    asset_ix = {a: i for i, a in enumerate(assets)}
    grid = np.full((len(days), len(assets), n_grid), np.nan)
    for day, secs, asset, price in records:
        g = int(round((secs - open_s) / step))
        if 0 <= g < n_grid:
            grid[day_ix[day], asset_ix[asset], g] = price  # last observation wins

    present = np.isfinite(grid)
    frac_missing = 1.0 - present.mean(axis=2)
    excluded = frac_missing > max_missing
    for t, i in zip(*np.nonzero(excluded)):
        logger.info("excluding %s on %s: %.0f%% of grid missing", assets[i], days[t], 100 * frac_missing[t, i])

    filled = pd.DataFrame(grid.reshape(-1, n_grid).T).ffill().bfill().to_numpy().T
    grid = filled.reshape(grid.shape)
    grid[excluded] = np.nan
    sizes = None
    if (~excluded).any():
        sizes = np.full(excluded.shape, np.nan)
        sizes[~excluded] = np.median(grid[~excluded], axis=-1)
    if log_prices:
        grid = np.log(grid)
    return PricePanel(assets, days, grid, excluded=excluded, sizes=sizes)


def daily_returns(p: PricePanel) -> ReturnPanel:
    """Sum of intraday log-price increments per (day, asset)."""
    r = p._increments().sum(axis=2)
    r[p.excluded] = np.nan
    return ReturnPanel(p.days, p.asset_ids, r)


def realized_volatility(p: PricePanel) -> VolatilityPanel:
    """Square root of summed squared intraday increments per (day, asset)."""
    inc = p._increments()
    rv = np.sqrt((inc**2).sum(axis=2))
    rv[p.excluded] = np.nan
    return VolatilityPanel(p.days, p.asset_ids, rv)


def align_panel(v: VolatilityPanel, policy: AlignPolicy = "drop-asset") -> tuple[VolatilityPanel, PanelAlignment]:
    """Balance a panel by dropping assets or dates with missing cells."""
    missing = ~np.isfinite(v.rv)
    if policy == "drop-asset":
        keep_a = ~missing.any(axis=0)
        keep_d = np.ones(len(v.dates), dtype=bool)
    elif policy == "drop-date":
        keep_d = ~missing.any(axis=1)
        keep_a = np.ones(len(v.asset_ids), dtype=bool)
    elif policy == "require-full":
        if missing.any():
            raise AlignmentError(f"no balanced panel under policy {policy!r}: {int(missing.sum())} missing cells")
        keep_a = np.ones(len(v.asset_ids), dtype=bool)
        keep_d = np.ones(len(v.dates), dtype=bool)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    if not keep_a.any() or not keep_d.any():
        raise AlignmentError(f"no balanced panel under policy {policy!r}")

    dropped = ~(keep_d[:, None] & keep_a[None, :])
    out = VolatilityPanel(
        [d for d, k in zip(v.dates, keep_d) if k],
        [a for a, k in zip(v.asset_ids, keep_a) if k],
        v.rv[np.ix_(keep_d, keep_a)],
    )
    report = PanelAlignment(
        kept_assets=list(out.asset_ids),
        kept_dates=list(out.dates),
        dropped=dropped,
        policy=policy,
        dropped_assets=[a for a, k in zip(v.asset_ids, keep_a) if not k],
        dropped_dates=[d for d, k in zip(v.dates, keep_d) if not k],
    )
    return out, report
