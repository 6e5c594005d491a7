"""Total, directional and net connectedness from normalized adjacency tensors.

Every measure is in percent and uses the sum of the whole normalized
aggregate matrix as its denominator (equal to ``N`` after normalization), so
FROM and TO both add up to the total across assets and measures are additive
over a partition of bands.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .spectral import FrequencyBand, band_gfevd_many, default_bands, diagonalize_sigma, normalize_adjacency, var_to_vma

logger = logging.getLogger(__name__)

QUANTILES = (16.0, 50.0, 84.0)
QUANTILE_NAMES = ("p16", "median", "p84")


def _pair(theta_tilde_band, theta_tilde_aggregate):
    tb = np.asarray(theta_tilde_band, dtype=float)
    ta = np.asarray(theta_tilde_aggregate, dtype=float)
    if tb.shape[-2:] != ta.shape[-2:] or tb.shape[-1] != tb.shape[-2]:
        raise ValueError(f"dimension mismatch: {tb.shape} vs {ta.shape}")
    return tb, ta.sum(axis=(-2, -1))


def _offdiag(a: np.ndarray, axis: int) -> np.ndarray:
    return a.sum(axis=axis) - np.diagonal(a, axis1=-2, axis2=-1)


def _pick(vec: np.ndarray, j):
    if j is None:
        return vec
    N = vec.shape[-1]
    if not 0 <= j < N:
        raise IndexError(f"asset index {j} out of range 0..{N - 1}")
    return vec[..., j]


def total_connectedness(theta_tilde_band, theta_tilde_aggregate) -> np.ndarray:
    tb, denom = _pair(theta_tilde_band, theta_tilde_aggregate)
    off = tb.sum(axis=(-2, -1)) - np.trace(tb, axis1=-2, axis2=-1)
    return 100.0 * off / denom


def from_connectedness(theta_tilde_band, theta_tilde_aggregate, j: int | None = None) -> np.ndarray:
    """Share received by asset ``j`` from all others (row sums off the diagonal)."""
    tb, denom = _pair(theta_tilde_band, theta_tilde_aggregate)
    return _pick(100.0 * _offdiag(tb, -1) / denom[..., None], j)


def to_connectedness(theta_tilde_band, theta_tilde_aggregate, j: int | None = None) -> np.ndarray:
    """Share transmitted by asset ``j`` to all others (column sums off the diagonal)."""
    tb, denom = _pair(theta_tilde_band, theta_tilde_aggregate)
    return _pick(100.0 * _offdiag(tb, -2) / denom[..., None], j)


def net_directional(to, frm):
    return np.asarray(to) - np.asarray(frm)


def summarize_draws(values, axis: int = 0) -> np.ndarray:
    """16th, 50th and 84th percentiles along ``axis`` (linear interpolation)."""
    v = np.asarray(values, dtype=float)
    if v.shape[axis] < 2:
        raise ValueError("need at least 2 draws")
    return np.percentile(v, QUANTILES, axis=axis, method="linear")


@dataclass
class ConnectednessSeries:
    """Posterior quantiles of each measure.

    ``total`` has shape ``(3, G, B)`` and ``from_conn``/``to_conn``/``net``
    ``(3, G, B, N)``; axis 0 runs over (p16, median, p84).  Quantiles are
    taken per measure, so ``net`` holds quantiles of per-draw net values.
    """

    dates: list
    bands: list[str]
    asset_ids: list[str]
    total: np.ndarray
    from_conn: np.ndarray
    to_conn: np.ndarray
    net: np.ndarray
    median_theta: np.ndarray | None = None

    def median_net(self, band: str) -> np.ndarray:
        return self.net[1, :, self.bands.index(band), :]

    def to_csv(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        dates = [str(x) for x in self.dates]
        for b, name in enumerate(self.bands):
            df = pd.DataFrame({"date": dates})
            for q, qn in enumerate(QUANTILE_NAMES):
                df[qn] = self.total[q, :, b]
            path = d / f"total_{name}.csv"
            df.to_csv(path, index=False, float_format="%.10f")
            written.append(path)
        G, B, N = self.net.shape[1:]
        for fname, arr in (("to", self.to_conn), ("from", self.from_conn), ("net", self.net)):
            df = pd.DataFrame(
                {
                    "date": np.repeat(dates, B * N),
                    "band": np.tile(np.repeat(self.bands, N), G),
                    "asset": np.tile(self.asset_ids, G * B),
                }
            )
            for q, qn in enumerate(QUANTILE_NAMES):
                df[qn] = arr[q].reshape(-1)
            path = d / f"{fname}.csv"
            df.to_csv(path, index=False, float_format="%.10f")
            written.append(path)
        return written

    @classmethod
    def read_csv(cls, directory) -> "ConnectednessSeries":
        d = Path(directory)
        net_df = pd.read_csv(d / "net.csv", dtype={"asset": str})
        dates = list(dict.fromkeys(net_df["date"]))
        bands = list(dict.fromkeys(net_df["band"]))
        assets = list(dict.fromkeys(net_df["asset"]))
        G, B, N = len(dates), len(bands), len(assets)

        def grid(name):
            df = pd.read_csv(d / f"{name}.csv", dtype={"asset": str})
            return np.stack([df[q].to_numpy().reshape(G, B, N) for q in QUANTILE_NAMES])

        total = np.stack(
            [np.stack([pd.read_csv(d / f"total_{b}.csv")[q].to_numpy() for b in bands], axis=-1) for q in QUANTILE_NAMES]
        )
        return cls(dates, bands, assets, total, grid("from"), grid("to"), grid("net"))


def measures_from_theta(theta: np.ndarray, agg_index: int = -1) -> dict:
    """Per-draw measures from unnormalized band tensors ``(..., B, N, N)``."""
    agg = theta[..., agg_index, :, :]
    tt = normalize_adjacency(theta, agg[..., None, :, :])
    tt_agg = tt[..., agg_index, :, :][..., None, :, :]
    to = to_connectedness(tt, tt_agg)
    frm = from_connectedness(tt, tt_agg)
    return {
        "theta_tilde": tt,
        "total": total_connectedness(tt, tt_agg),
        "from": frm,
        "to": to,
        "net": net_directional(to, frm),
    }


def _connect_points(Phi, Sigma, bands, H, n_freq, diagonalize):
    """Quantile summaries for a block of time points; pure function."""
    out = {k: [] for k in ("total", "from", "to", "net", "theta")}
    for g in range(Phi.shape[0]):
        S = diagonalize_sigma(Sigma[g]) if diagonalize else Sigma[g]
        theta = band_gfevd_many(var_to_vma(Phi[g], H), S, bands, n_freq)
        m = measures_from_theta(theta)
        for key in ("total", "from", "to", "net"):
            out[key].append(summarize_draws(m[key], axis=0))
        out["theta"].append(np.median(m["theta_tilde"], axis=0))
    return {k: np.stack(v, axis=1 if k != "theta" else 0) for k, v in out.items()}


def connectedness_path(field, bands: Sequence[FrequencyBand] | None = None, H: int = 100, n_freq: int = 512,
                       diagonalize: bool = True, workers: int = 1, asset_ids=None) -> ConnectednessSeries:
    """Connectedness quantiles at every time point of a ``PosteriorField``.

    The aggregate band must come last in ``bands``; it supplies the
    normalization.  Only the draw-wise median of the normalized tensors is
    kept.
    """
    from .qbll import resolve_workers

    bands = list(bands or default_bands())
    if bands[-1].label != "aggregate":
        raise ValueError("last band must be the aggregate band")
    G = field.Phi.shape[0]
    N = field.Phi.shape[-1]
    n_workers = resolve_workers(workers)
    args = (bands, H, n_freq, diagonalize)
    if n_workers == 1:
        res = _connect_points(field.Phi, field.Sigma, *args)
    else:
        size = max(1, math.ceil(G / (n_workers * 4)))
        blocks = [slice(s, s + size) for s in range(0, G, size)]
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            futs = [ex.submit(_connect_points, field.Phi[b], field.Sigma[b], *args) for b in blocks]
            parts = [f.result() for f in futs]
        res = {k: np.concatenate([p[k] for p in parts], axis=1 if k != "theta" else 0) for k in parts[0]}
    dates = [field.dates[k - 1] for k in field.ks] if field.dates is not None else [int(k) for k in field.ks]
    ids = list(asset_ids) if asset_ids is not None else [f"A{i}" for i in range(N)]
    return ConnectednessSeries(
        dates=dates,
        bands=[b.label for b in bands],
        asset_ids=ids,
        total=res["total"],
        from_conn=res["from"],
        to_conn=res["to"],
        net=res["net"],
        median_theta=res["theta"],
    )
