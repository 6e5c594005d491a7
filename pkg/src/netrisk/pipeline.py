"""Run configuration, artifact manifest and pipeline stages."""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import yaml

from . import connectedness as conn
from . import data as dmod
from . import econsim, factors as fac, pricing, qbll, spectral

logger = logging.getLogger(__name__)

STAGE_ORDER = ["ingest", "estimate", "connect", "factors", "betas", "fmb", "sort", "controls", "simulate", "report"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


@dataclass
class InputsConfig:
    intraday: str | None = None
    ff5: str | None = None
    vix: str | None = None
    skew_index: str | None = None
    volume: str | None = None


@dataclass
class DataConfig:
    grid_minutes: float = 5.0
    log_prices: bool = True
    max_missing: float = 0.2
    align_policy: str = "drop-asset"

    def validate(self):
        if self.align_policy not in ("drop-asset", "drop-date", "require-full"):
            raise ConfigError(f"data.align_policy: unknown policy {self.align_policy!r}")
        if not 0 <= self.max_missing < 1:
            raise ConfigError("data.max_missing must be in [0, 1)")
        if self.grid_minutes <= 0:
            raise ConfigError("data.grid_minutes must be positive")


@dataclass
class QbllBlock:
    p: int = 2
    shrinkage: float = 0.05
    own_lag_mean: float = 0.1
    bandwidth: float | None = None
    n_draws: int = 500
    weight_scale: str = "raw"
    reject_unstable: bool = False

    def validate(self):
        if self.p < 1 or self.n_draws < 1:
            raise ConfigError("qbll.p and qbll.n_draws must be >= 1")
        if self.shrinkage <= 0:
            raise ConfigError("qbll.shrinkage must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("qbll.bandwidth must be positive")
        if self.weight_scale not in ("raw", "normalized"):
            raise ConfigError("qbll.weight_scale must be 'raw' or 'normalized'")


@dataclass
class SpectralBlock:
    H: int = 100
    n_freq: int = 512
    week_days: int = 5
    diagonalize: bool = True

    def validate(self):
        if self.H < 1 or self.n_freq < 64:
            raise ConfigError("spectral.H must be >= 1 and spectral.n_freq >= 64")
        if self.week_days < 2:
            raise ConfigError("spectral.week_days must be >= 2")


@dataclass
class FactorBlock:
    size_split: float = 50.0
    conn_percentiles: list = field(default_factory=lambda: [30.0, 70.0])
    weighting: str = "value"
    rebalance: str = "daily"
    lag: int = 1

    def spec(self, **kw) -> fac.SortSpec:
        return fac.SortSpec(self.size_split, tuple(self.conn_percentiles), self.weighting, self.rebalance,
                            lag=self.lag, **kw)

    def validate(self):
        try:
            self.spec()
        except ValueError as exc:
            raise ConfigError(f"factors: {exc}") from None


@dataclass
class PricingBlock:
    window: int = 756
    nw_lags: int = 12
    rolling_nw_lags: int = 24
    factors: list = field(default_factory=lambda: ["NET_aggregate", "mkt_rf"])
    sort_factor: str = "NET_aggregate"
    weighting: str = "equal"
    alpha_window: int = 252
    controls_window: int = 252
    fmb_mode: str = "rolling"

    def validate(self):
        if self.window < len(self.factors) + 3:
            raise ConfigError("pricing.window too short for the number of factors")
        if self.fmb_mode not in ("rolling", "full"):
            raise ConfigError("pricing.fmb_mode must be 'rolling' or 'full'")
        if self.weighting not in ("equal", "value"):
            raise ConfigError("pricing.weighting must be 'equal' or 'value'")
        if self.sort_factor not in self.factors:
            raise ConfigError("pricing.sort_factor must be one of pricing.factors")


@dataclass
class EconBlock:
    N: int = 3
    rho_SL: float = 0.3
    covariance_factor: float = 1.0
    n_paths: int = 100_000
    dt: float = 1e-3
    s: float = 0.5
    v_S: float = 0.02
    v_L: float = 0.01
    hawkes_horizon: float = 10_000.0
    path_horizon: float = 1.0
    n_summary_paths: int = 200

    def validate(self):
        if not 0 < self.s < 1:
            raise ConfigError("econsim.s must be in (0, 1)")
        if self.n_paths < 2 or self.dt <= 0:
            raise ConfigError("econsim.n_paths must be >= 2 and econsim.dt positive")
        if self.covariance_factor not in (1, 2):
            raise ConfigError("econsim.covariance_factor must be 1 or 2")


BLOCKS = {
    "inputs": InputsConfig,
    "data": DataConfig,
    "qbll": QbllBlock,
    "spectral": SpectralBlock,
    "factors": FactorBlock,
    "pricing": PricingBlock,
    "econsim": EconBlock,
}


def _coerce(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    obj = cls()
    for k, v in raw.items():
        default = getattr(obj, k)
        if v is not None and default is not None:
            if isinstance(default, bool):
                ok = isinstance(v, bool)
            elif isinstance(default, (int, float)):
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
                if ok and isinstance(default, int) and not isinstance(default, bool) and float(v) != int(v):
                    ok = False
                if ok:
                    v = type(default)(v)
            elif isinstance(default, list):
                ok = isinstance(v, list)
            else:
                ok = isinstance(v, type(default))
            if not ok:
                raise ConfigError(f"{where}.{k}: expected {type(default).__name__}, got {v!r}")
        setattr(obj, k, v)
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


@dataclass
class RunConfig:
    output_dir: str = "out"
    stages: list = field(default_factory=list)
    seed: int = 0
    workers: int = 1
    inputs: InputsConfig = field(default_factory=InputsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    qbll: QbllBlock = field(default_factory=QbllBlock)
    spectral: SpectralBlock = field(default_factory=SpectralBlock)
    factors: FactorBlock = field(default_factory=FactorBlock)
    pricing: PricingBlock = field(default_factory=PricingBlock)
    econsim: EconBlock = field(default_factory=EconBlock)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        top = {"output_dir", "stages", "seed", "workers"} | set(BLOCKS)
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        cfg = cls()
        for k in ("output_dir", "seed", "workers"):
            if k in raw:
                setattr(cfg, k, raw[k])
        if not isinstance(cfg.seed, int) or not isinstance(cfg.workers, int) or cfg.workers < 1:
            raise ConfigError("seed must be an integer and workers a positive integer")
        stages = raw.get("stages") or []
        if not isinstance(stages, list):
            raise ConfigError("stages must be a list")
        bad = [s for s in stages if s not in STAGE_ORDER]
        if bad:
            raise ConfigError(f"unknown stages {bad}")
        cfg.stages = [s for s in STAGE_ORDER if s in stages]
        for name, bcls in BLOCKS.items():
            setattr(cfg, name, _coerce(bcls, raw.get(name), name))
        if base_dir is not None:
            cfg.output_dir = str((base_dir / cfg.output_dir).resolve()) if not Path(cfg.output_dir).is_absolute() \
                else cfg.output_dir
            for k, v in asdict(cfg.inputs).items():
                if v is not None and not Path(v).is_absolute():
                    setattr(cfg.inputs, k, str((base_dir / v).resolve()))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw or {}, base_dir=path.parent)

    def block_hash(self, *names) -> str:
        payload = {n: (asdict(getattr(self, n)) if dataclasses.is_dataclass(getattr(self, n)) else getattr(self, n))
                   for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------------------
# artifact store


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class ArtifactStore:
    """Output directory plus ``manifest.json`` recording stage hashes."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.manifest = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}}

    def entry(self, stage: str) -> dict | None:
        return self.manifest["stages"].get(stage)

    def is_current(self, stage: str, inputs_hash: str, config_hash: str) -> bool:
        e = self.entry(stage)
        if not e or e["inputs_hash"] != inputs_hash or e["config_hash"] != config_hash:
            return False
        for rel, h in e["outputs"].items():
            p = self.root / rel
            if not p.exists() or file_hash(p) != h:
                return False
        return True

    def record(self, stage: str, inputs_hash: str, config_hash: str, outputs: list[Path], started: str) -> None:
        self.manifest["stages"][stage] = {
            "inputs_hash": inputs_hash,
            "config_hash": config_hash,
            "outputs": {str(Path(o).relative_to(self.root)): file_hash(o) for o in outputs},
            "started": started,
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        }
        self.save()

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# stages


@dataclass
class Stage:
    name: str
    func: Callable
    inputs: Callable  # cfg -> list of (path, producing stage or None)
    outputs: list
    blocks: tuple


def _out(cfg: RunConfig, rel: str) -> Path:
    return Path(cfg.output_dir) / rel


def _external(cfg: RunConfig, key: str, required: bool = True):
    v = getattr(cfg.inputs, key)
    if v is None:
        return [] if not required else [(None, f"inputs.{key}")]
    return [(Path(v), None)]


def _read_wide(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    df["date"] = pd.to_datetime(df["date"])
    df = df.set_index("date")
    df.columns = [str(c) for c in df.columns]
    return df


def _read_series(path) -> pd.Series:
    df = _read_wide(path)
    return df.iloc[:, 0]


def stage_ingest(cfg: RunConfig, workers: int) -> None:
    d = cfg.data
    panel = dmod.ingest_intraday(cfg.inputs.intraday, grid_minutes=d.grid_minutes, log_prices=d.log_prices,
                                 max_missing=d.max_missing)
    rv, align = dmod.align_panel(dmod.realized_volatility(panel), d.align_policy)
    ret = dmod.daily_returns(panel)
    ai = [panel.asset_ids.index(a) for a in rv.asset_ids]
    di = [panel.days.index(x) for x in rv.dates]
    out = _out(cfg, "data")
    out.mkdir(parents=True, exist_ok=True)
    rv.to_csv(out / "rv.csv")
    dmod.ReturnPanel(rv.dates, rv.asset_ids, ret.returns[np.ix_(di, ai)]).to_csv(out / "returns.csv")
    sizes = panel.sizes if panel.sizes is not None else np.full(ret.returns.shape, np.nan)
    dmod.ReturnPanel(rv.dates, rv.asset_ids, sizes[np.ix_(di, ai)]).to_csv(out / "sizes.csv")
    pd.DataFrame(
        {"kind": ["asset"] * len(align.dropped_assets) + ["date"] * len(align.dropped_dates),
         "dropped": list(align.dropped_assets) + [x.isoformat() for x in align.dropped_dates]}
    ).to_csv(out / "alignment.csv", index=False)


def stage_estimate(cfg: RunConfig, workers: int) -> None:
    rv = dmod.VolatilityPanel.read_csv(_out(cfg, "data/rv.csv"))
    q = cfg.qbll
    qc = qbll.QBLLConfig(p=q.p, shrinkage=q.shrinkage, own_lag_mean=q.own_lag_mean, bandwidth=q.bandwidth,
                         n_draws=q.n_draws, seed=cfg.seed, weight_scale=q.weight_scale,
                         reject_unstable=q.reject_unstable)
    field_ = qbll.estimate_path(rv, qc, workers=workers)
    field_.save(_out(cfg, "posterior"))


def stage_connect(cfg: RunConfig, workers: int) -> None:
    rv = dmod.VolatilityPanel.read_csv(_out(cfg, "data/rv.csv"))
    field_ = qbll.PosteriorField.load(_out(cfg, "posterior"), dates=rv.dates)
    s = cfg.spectral
    series = conn.connectedness_path(field_, spectral.default_bands(s.week_days), s.H, s.n_freq, s.diagonalize,
                                     workers, asset_ids=rv.asset_ids)
    out = _out(cfg, "connectedness")
    series.to_csv(out)
    np.save(out / "median_theta.npy", series.median_theta)


def _net_frame(series: conn.ConnectednessSeries, band: str) -> pd.DataFrame:
    return pd.DataFrame(series.median_net(band), index=pd.to_datetime(series.dates), columns=series.asset_ids)


def stage_factors(cfg: RunConfig, workers: int) -> None:
    returns = _read_wide(_out(cfg, "data/returns.csv"))
    sizes = _read_wide(_out(cfg, "data/sizes.csv"))
    series = conn.ConnectednessSeries.read_csv(_out(cfg, "connectedness"))
    out = _out(cfg, "factors")
    out.mkdir(parents=True, exist_ok=True)
    all_f, by_band, tables = [], {}, []
    for band in series.bands:
        net = _net_frame(series, band)
        res = fac.double_sort(returns, sizes, net, cfg.factors.spec())
        legs = fac.FactorLegs.from_sort(res, band)
        f1, f2 = fac.net_factor(legs), fac.net_factor_alt(legs)
        all_f += [f1, f2]
        by_band[band] = f1
        grid = fac.double_sort(returns, sizes, net, cfg.factors.spec(size_groups=5, conn_grid="quintile"))
        t = grid.annual_table()
        t.index = [f"size{i + 1}" for i in t.index]
        t.columns = [f"net{c + 1}" for c in t.columns]
        t.insert(0, "band", band)
        tables.append(t)
    if "short" in by_band and "long" in by_band:
        all_f.append(fac.orthogonalize(by_band["short"], by_band["long"]))
    fac.factors_to_csv(all_f, out / "factors.csv")
    pd.concat(tables).rename_axis("size").to_csv(out / "double_sort.csv", float_format="%.10f")
    named = {f"{f.variant}_{f.band}": f for f in all_f}
    st = fac.factor_stats(named)
    st["summary"].rename_axis("factor").to_csv(out / "stats.csv", float_format="%.10f")
    st["corr"].rename_axis("factor").to_csv(out / "corr.csv", float_format="%.10f")


def _pricing_inputs(cfg: RunConfig):
    returns = _read_wide(_out(cfg, "data/returns.csv"))
    F = fac.read_factors_csv(_out(cfg, "factors/factors.csv"))
    rf = None
    if cfg.inputs.ff5:
        ff5 = pricing.read_ff5(cfg.inputs.ff5)
        F = F.join(ff5, how="outer")
        rf = ff5["rf"]
    missing = [c for c in cfg.pricing.factors if c not in F.columns]
    if missing:
        raise ConfigError(f"pricing.factors not available: {missing}")
    excess = returns.sub(rf.reindex(returns.index).fillna(0.0), axis=0) if rf is not None else returns
    return excess, F[cfg.pricing.factors].reindex(returns.index)


def stage_betas(cfg: RunConfig, workers: int) -> None:
    excess, F = _pricing_inputs(cfg)
    ok = F.notna().all(axis=1)
    bp = pricing.rolling_betas(excess[ok], F[ok], window=cfg.pricing.window, nw_lags=cfg.pricing.rolling_nw_lags)
    bp.to_csv(_out(cfg, "pricing/betas.csv"))


def stage_fmb(cfg: RunConfig, workers: int) -> None:
    excess, F = _pricing_inputs(cfg)
    ok = F.notna().all(axis=1)
    if cfg.pricing.fmb_mode == "rolling":
        bp = pricing.BetaPanel.read_csv(_out(cfg, "pricing/betas.csv"), cfg.pricing.window)
        res = pricing.fama_macbeth(excess, bp, F[ok], nw_lags=cfg.pricing.rolling_nw_lags, beta_lag=1)
    else:
        betas = pricing.full_sample_betas(excess[ok], F[ok])
        res = pricing.fama_macbeth(excess[ok], betas, F[ok], nw_lags=cfg.pricing.nw_lags)
    out = _out(cfg, "pricing")
    out.mkdir(parents=True, exist_ok=True)
    tab = res.table()
    tab["shanken"] = res.shanken
    tab.rename_axis("term").to_csv(out / "fmb.csv", float_format="%.10g")
    s = res.series.copy()
    s.index = s.index.strftime("%Y-%m-%d")
    s.rename_axis("date").to_csv(out / "fmb_series.csv", float_format="%.10g")


def stage_sort(cfg: RunConfig, workers: int) -> None:
    returns = _read_wide(_out(cfg, "data/returns.csv"))
    bp = pricing.BetaPanel.read_csv(_out(cfg, "pricing/betas.csv"), cfg.pricing.window)
    ff5 = pricing.read_ff5(cfg.inputs.ff5) if cfg.inputs.ff5 else None
    sizes = _read_wide(_out(cfg, "data/sizes.csv"))
    p = cfg.pricing
    kw = dict(weighting=p.weighting, sizes=sizes, ff5=ff5, nw_lags=p.nw_lags, alpha_window=p.alpha_window)
    out = _out(cfg, "pricing")
    for name, fn in (("sort", pricing.sort_on_beta), ("predictive_sort", pricing.predictive_sort)):
        res = fn(bp, returns, p.sort_factor, **kw)
        tab = res.table()
        tab["hedge_t"] = np.nan
        tab.loc["5-1", "hedge_t"] = res.hedge_t
        tab.rename_axis("portfolio").to_csv(out / f"{name}.csv", float_format="%.10g")


def stage_controls(cfg: RunConfig, workers: int) -> None:
    returns = _read_wide(_out(cfg, "data/returns.csv"))
    if not cfg.inputs.ff5:
        raise ConfigError("controls need inputs.ff5")
    kw = {}
    if cfg.inputs.vix:
        kw["vix"] = _read_series(cfg.inputs.vix)
        kw["rv"] = _read_wide(_out(cfg, "data/rv.csv"))
        kw["sizes"] = _read_wide(_out(cfg, "data/sizes.csv"))
    if cfg.inputs.skew_index:
        kw["skew_index"] = _read_series(cfg.inputs.skew_index)
    if cfg.inputs.volume:
        kw["volume"] = _read_wide(cfg.inputs.volume)
    res = pricing.build_controls(returns, cfg.inputs.ff5, window=cfg.pricing.controls_window, **kw)
    res.to_csv(_out(cfg, "pricing/controls.csv"))


def stage_simulate(cfg: RunConfig, workers: int) -> None:
    e = cfg.econsim
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ec = econsim.default_config(e.N, e.rho_SL)
        ec = dataclasses.replace(ec, covariance_factor=e.covariance_factor)
    out = _out(cfg, "econsim")
    out.mkdir(parents=True, exist_ok=True)
    mc = econsim.moment_check(ec, e.s, e.v_S, e.v_L, e.n_paths, e.dt, cfg.seed)
    mc2 = econsim.moment_check(ec, e.s, e.v_S, e.v_L, e.n_paths, e.dt, cfg.seed, covariance_factor=2)
    rf = float(econsim.risk_free_rate(e.s, e.v_S, e.v_L, ec))
    sdf = float(econsim.sdf_innovation(e.s, e.v_S, e.v_L, ec))
    rows = [
        ("mean", mc["mean_mc"], mc["mean_se"], mc["mean_formula"], mc["mean_z"]),
        ("variance", mc["var_mc"], mc["var_se"], mc["var_formula"], mc["var_z"]),
        ("variance_cov2", mc2["var_mc"], mc2["var_se"], mc2["var_formula"], mc2["var_z"]),
        ("rf_plus_sdf", rf + sdf, 0.0, 0.0, float("nan")),
    ]
    pd.DataFrame(rows, columns=["quantity", "monte_carlo", "se", "formula", "z"]).to_csv(
        out / "moments.csv", index=False, float_format="%.10g")
    hrows = []
    for lab in ("S", "L"):
        hp = econsim.simulate_hawkes(ec, lab, e.hawkes_horizon, econsim.substream(cfg.seed, "simulate", lab))
        m, se = econsim.batch_mean_rate(hp)
        st = econsim.stationary_intensity(ec, lab)
        for j in range(ec.N):
            hrows.append((lab, j, m[j], se[j], st[j], (m[j] - st[j]) / se[j]))
    pd.DataFrame(hrows, columns=["horizon", "node", "rate", "se", "stationary", "z"]).to_csv(
        out / "hawkes.csv", index=False, float_format="%.10g")
    sim = econsim.simulate_economy(ec, e.n_summary_paths, e.path_horizon, e.dt, cfg.seed, workers=workers)
    summ = pd.DataFrame({
        "t": sim.t,
        "mean_s": sim.s.mean(axis=0),
        "min_s": sim.s.min(axis=0),
        "max_s": sim.s.max(axis=0),
        "mean_c": sim.c.mean(axis=0),
        "mean_v_S": sim.v_S.mean(axis=0),
        "mean_v_L": sim.v_L.mean(axis=0),
    })
    summ.iloc[:: max(1, len(summ) // 100)].to_csv(out / "paths_summary.csv", index=False, float_format="%.10g")


def stage_report(cfg: RunConfig, workers: int) -> None:
    write_report(cfg.output_dir, "all")


def _ins(*items):
    return lambda cfg: [(_out(cfg, rel), st) for rel, st in items]


STAGES = {
    "ingest": Stage("ingest", stage_ingest, lambda c: _external(c, "intraday"),
                    ["data/rv.csv", "data/returns.csv", "data/sizes.csv", "data/alignment.csv"], ("inputs", "data")),
    "estimate": Stage("estimate", stage_estimate, _ins(("data/rv.csv", "ingest")), ["posterior"], ("qbll", "seed")),
    "connect": Stage("connect", stage_connect, _ins(("data/rv.csv", "ingest"), ("posterior", "estimate")),
                     ["connectedness"], ("spectral",)),
    "factors": Stage("factors", stage_factors,
                     _ins(("data/returns.csv", "ingest"), ("data/sizes.csv", "ingest"), ("connectedness", "connect")),
                     ["factors/factors.csv", "factors/double_sort.csv", "factors/stats.csv", "factors/corr.csv"],
                     ("factors",)),
    "betas": Stage("betas", stage_betas,
                   lambda c: _ins(("data/returns.csv", "ingest"), ("factors/factors.csv", "factors"))(c)
                   + _external(c, "ff5", False), ["pricing/betas.csv"], ("pricing",)),
    "fmb": Stage("fmb", stage_fmb,
                 lambda c: _ins(("data/returns.csv", "ingest"), ("factors/factors.csv", "factors"),
                                ("pricing/betas.csv", "betas"))(c) + _external(c, "ff5", False),
                 ["pricing/fmb.csv", "pricing/fmb_series.csv"], ("pricing",)),
    "sort": Stage("sort", stage_sort,
                  lambda c: _ins(("data/returns.csv", "ingest"), ("data/sizes.csv", "ingest"),
                                 ("pricing/betas.csv", "betas"))(c) + _external(c, "ff5", False),
                  ["pricing/sort.csv", "pricing/predictive_sort.csv"], ("pricing",)),
    "controls": Stage("controls", stage_controls,
                      lambda c: _ins(("data/returns.csv", "ingest"), ("data/rv.csv", "ingest"),
                                     ("data/sizes.csv", "ingest"))(c)
                      + _external(c, "ff5") + _external(c, "vix", False) + _external(c, "skew_index", False)
                      + _external(c, "volume", False),
                      ["pricing/controls.csv"], ("pricing",)),
    "simulate": Stage("simulate", stage_simulate, lambda c: [],
                      ["econsim/moments.csv", "econsim/hawkes.csv", "econsim/paths_summary.csv"], ("econsim", "seed")),
    "report": Stage("report", stage_report,
                    _ins(("factors/double_sort.csv", "factors"), ("factors/stats.csv", "factors"),
                         ("pricing/fmb.csv", "fmb"), ("pricing/sort.csv", "sort")),
                    ["report"], ()),
}


def check_plan(cfg: RunConfig) -> None:
    """Every input must exist or be produced by an earlier selected stage."""
    for i, name in enumerate(cfg.stages):
        earlier = set(cfg.stages[:i])
        for path, producer in STAGES[name].inputs(cfg):
            if path is None:
                raise ConfigError(f"stage {name}: {producer} is required")
            if producer in earlier:
                continue
            if not Path(path).exists():
                hint = f" (run stage {producer!r} first)" if producer else ""
                raise ConfigError(f"stage {name}: missing input {path}{hint}")


@dataclass
class RunResult:
    status: int
    executed: list
    cached: list
    manifest: dict


def run(cfg: RunConfig, workers: int | None = None) -> RunResult:
    """Run the selected stages in dependency order, skipping cache hits."""
    if not cfg.stages:
        store = ArtifactStore(cfg.output_dir)
        return RunResult(0, [], [], store.manifest)
    check_plan(cfg)
    n_workers = qbll.resolve_workers(workers or cfg.workers)
    store = ArtifactStore(cfg.output_dir)
    executed, cached = [], []
    for name in cfg.stages:
        st = STAGES[name]
        ins = [p for p, _ in st.inputs(cfg)]
        ih = hashlib.sha256("".join(file_hash(p) for p in ins).encode()).hexdigest()
        ch = cfg.block_hash(*st.blocks) if st.blocks else "none"
        if store.is_current(name, ih, ch):
            logger.info("stage %s: cache hit", name)
            cached.append(name)
            continue
        started = dt.datetime.now(dt.timezone.utc).isoformat()
        logger.info("stage %s: running", name)
        try:
            st.func(cfg, n_workers)
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        store.record(name, ih, ch, [_out(cfg, o) for o in st.outputs], started)
        executed.append(name)
    return RunResult(0, executed, cached, store.manifest)


# ---------------------------------------------------------------------------
# report


def _pct(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"{100 * x:.2f}"


def _num(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.2f}"


def _bracket(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"[{x:.2f}]"


def _markdown(df: pd.DataFrame) -> str:
    cols = [str(c) for c in df.columns]
    lines = ["| " + " | ".join([""] + cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for idx, row in df.iterrows():
        lines.append("| " + " | ".join([str(idx)] + [str(v) for v in row.tolist()]) + " |")
    return "\n".join(lines) + "\n"


def _need(root: Path, rel: str, stage: str) -> Path:
    p = root / rel
    if not p.exists():
        raise StageError("report", f"missing artifact {rel}; rerun stage {stage!r}")
    return p


def table1(root: Path) -> pd.DataFrame:
    df = pd.read_csv(_need(root, "factors/double_sort.csv", "factors"))
    parts = []
    for band, g in df.groupby("band", sort=False):
        t = g.set_index("size").drop(columns="band")
        t = t.map(_pct)
        t.index = [f"{band} {i}" for i in t.index]
        parts.append(t)
    return pd.concat(parts)


def table2(root: Path) -> pd.DataFrame:
    df = pd.read_csv(_need(root, "factors/stats.csv", "factors")).set_index("factor")
    return pd.DataFrame({
        "Mean (%)": df["mean"].map(_pct),
        "Std (%)": df["sd"].map(_pct),
        "Skew": df["skew"].map(_num),
        "Kurt": df["kurt"].map(_num),
    })


def table3(root: Path) -> pd.DataFrame:
    df = pd.read_csv(_need(root, "pricing/fmb.csv", "fmb")).set_index("term")
    rows = []
    for term, r in df.iterrows():
        rows.append((term, _pct(r["lambda"])))
        rows.append(("", _bracket(r["t_shanken"])))
    return pd.DataFrame(rows, columns=["term", "lambda (%)"]).set_index("term")


def table6(root: Path) -> pd.DataFrame:
    df = pd.read_csv(_need(root, "pricing/sort.csv", "sort")).set_index("portfolio")
    out = pd.DataFrame({"R_p (%)": df["R_p"].map(_pct), "alpha (%)": df["alpha"].map(_pct),
                        "t(alpha)": df["alpha_t"].map(_bracket)})
    out["t(hedge)"] = ""
    out.loc["5-1", "t(hedge)"] = _bracket(df.loc["5-1", "hedge_t"])
    return out


REPORTS = {"table1": table1, "table2": table2, "table3": table3, "table6": table6}


def write_report(output_dir, kind: str = "all") -> list[Path]:
    root = Path(output_dir)
    kinds = list(REPORTS) if kind == "all" else [kind]
    if any(k not in REPORTS for k in kinds):
        raise ConfigError(f"unknown report kind {kind!r}")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in kinds:
        t = REPORTS[k](root)
        t.to_csv(out / f"{k}.csv")
        (out / f"{k}.md").write_text(_markdown(t))
        written += [out / f"{k}.csv", out / f"{k}.md"]
    return written
