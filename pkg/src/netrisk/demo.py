"""Synthetic demo inputs: intraday prices, FF5 file, VIX, skew index, volume."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

FF5_SD = {"mkt_rf": 0.010, "smb": 0.005, "hml": 0.005, "rmw": 0.004, "cma": 0.004, "mom": 0.006}


def _intraday_times(grid_minutes: int = 5, open_="09:30", close="16:00") -> list[str]:
    h0, m0 = map(int, open_.split(":"))
    h1, m1 = map(int, close.split(":"))
    start, end = h0 * 60 + m0, h1 * 60 + m1
    return [f"{m // 60:02d}:{m % 60:02d}" for m in range(start, end + 1, grid_minutes)]


def simulate_demo_data(N: int = 10, T: int = 300, seed: int = 7, grid_minutes: int = 5):
    """Intraday prices with VAR(1) log-volatility spillovers and factor-driven drifts."""
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range("2020-01-02", periods=T)
    times = _intraday_times(grid_minutes)
    n_int = len(times) - 1
    # log daily vol with a few directed spillovers
    A = 0.55 * np.eye(N)
    for i in range(N):
        A[(i + 1) % N, i] += 0.15
        A[(i + 3) % N, i] += 0.08 * (i % 2)
    mean_h = math.log(0.012)
    h = np.full(N, mean_h)
    H = np.empty((T, N))
    for t in range(T):
        h = mean_h + A @ (h - mean_h) + 0.25 * rng.standard_normal(N)
        H[t] = h
    sigma = np.exp(H)
    ff5 = pd.DataFrame({k: sd * rng.standard_normal(T) for k, sd in FF5_SD.items()}, index=dates)
    ff5["mkt_rf"] += 0.0003
    ff5["rf"] = 0.0001
    loadings = np.column_stack([rng.uniform(0.6, 1.4, N), rng.normal(0, 0.5, N), rng.normal(0, 0.5, N)])
    drift = ff5[["mkt_rf", "smb", "hml"]].to_numpy() @ loadings.T + 0.0001
    p0 = np.log(rng.uniform(10, 200, N))
    rows = []
    level = p0.copy()
    for t in range(T):
        inc = drift[t] / n_int + sigma[t] / math.sqrt(n_int) * rng.standard_normal((n_int, N))
        path = level + np.vstack([np.zeros(N), np.cumsum(inc, axis=0)])
        level = path[-1] + 0.002 * rng.standard_normal(N)
        prices = np.exp(path)
        d = dates[t].strftime("%Y-%m-%d")
        for i in range(len(times)):
            for a in range(N):
                rows.append((d, times[i], f"A{a:02d}", prices[i, a]))
    intraday = pd.DataFrame(rows, columns=["date", "time", "asset", "price"])
    vix = pd.Series(100 * np.sqrt(252) * sigma.mean(axis=1) * (1.1 + 0.05 * rng.standard_normal(T)), index=dates)
    skew = pd.Series(120 + np.cumsum(rng.normal(0, 1, T)), index=dates)
    volume = pd.DataFrame(rng.uniform(1e5, 1e6, (T, N)), index=dates, columns=[f"A{a:02d}" for a in range(N)])
    return intraday, ff5, vix, skew, volume


def demo_config(data_dir: Path, output_dir: Path) -> dict:
    return {
        "seed": 0,
        "workers": 1,
        "output_dir": str(output_dir),
        "stages": ["ingest", "estimate", "connect", "factors", "betas", "fmb", "sort", "controls", "simulate",
                   "report"],
        "inputs": {
            "intraday": str(data_dir / "intraday.csv"),
            "ff5": str(data_dir / "ff5.csv"),
            "vix": str(data_dir / "vix.csv"),
            "skew_index": str(data_dir / "skew.csv"),
            "volume": str(data_dir / "volume.csv"),
        },
        "qbll": {"n_draws": 100},
        "pricing": {"window": 60, "alpha_window": 60, "controls_window": 60, "nw_lags": 5, "rolling_nw_lags": 5,
                    "factors": ["NET_aggregate", "mkt_rf"], "sort_factor": "NET_aggregate"},
        "econsim": {"n_paths": 20000, "hawkes_horizon": 2000.0},
    }


def write_demo(directory, N: int = 10, T: int = 300, seed: int = 7) -> Path:
    """Write demo inputs and ``config.yaml`` under ``directory``; returns the config path."""
    d = Path(directory)
    data = d / "data"
    data.mkdir(parents=True, exist_ok=True)
    intraday, ff5, vix, skew, volume = simulate_demo_data(N, T, seed)
    intraday.to_csv(data / "intraday.csv", index=False, float_format="%.6f")
    ff5.index.name = "date"
    ff5.reset_index().assign(date=lambda x: x["date"].dt.strftime("%Y-%m-%d"))[
        ["date", "mkt_rf", "smb", "hml", "rmw", "cma", "rf", "mom"]
    ].to_csv(data / "ff5.csv", index=False, float_format="%.8f")
    for name, s, col in (("vix", vix, "vix"), ("skew", skew, "skew")):
        pd.DataFrame({"date": s.index.strftime("%Y-%m-%d"), col: s.to_numpy()}).to_csv(
            data / f"{name}.csv", index=False, float_format="%.6f")
    vol = volume.copy()
    vol.insert(0, "date", vol.index.strftime("%Y-%m-%d"))
    vol.to_csv(data / "volume.csv", index=False, float_format="%.2f")
    cfg_path = d / "config.yaml"
    with open(cfg_path, "w") as fh:
        yaml.safe_dump(demo_config(data.resolve(), (d / "out").resolve()), fh, sort_keys=False)
    return cfg_path
