"""Two-tree endowment economy with Hawkes-driven volatility jumps.

Short (S) and long (L) dividend trees follow geometric Brownian motions with
square-root stochastic variances.  Each variance jumps when one of ``N``
mutually exciting Hawkes processes fires, and the same events hit the
matching variance component of the ``N`` risky assets.

Discretization: log-Euler for dividends and prices (positive by
construction), Euler with full truncation for every square-root variance,
Hawkes events simulated exactly by Ogata thinning and added to variances at
the end of the step in which they occur.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import substream

logger = logging.getLogger(__name__)

BROWNIAN_ORDER = ("Z_S", "Z_L", "Z_vS", "Z_vL", "W_S", "W_L", "W_S1", "W_L1")


class EconomyConfigError(ValueError):
    pass


class StationarityError(EconomyConfigError):
    pass


@dataclass
class HorizonConfig:
    """Parameters of one horizon (S or L).

    Arrays of length ``N``: jump sizes ``K``, Hawkes baselines ``ell_inf``
    and decays ``alpha``, asset variance parameters ``kappa_p``, ``vbar_p``,
    ``sigma_p``.  ``b[j, k]`` is the jump in node ``j``'s intensity caused by
    an event at node ``k``.
    """

    mu: float
    kappa_v: float
    vbar: float
    sigma_v: float
    K: np.ndarray
    ell_inf: np.ndarray
    alpha: np.ndarray
    b: np.ndarray
    Q: float = 0.0
    kappa_p: np.ndarray | None = None
    vbar_p: np.ndarray | None = None
    sigma_p: np.ndarray | None = None

    def __post_init__(self):
        self.K = np.atleast_1d(np.asarray(self.K, dtype=float))
        N = len(self.K)
        self.ell_inf = np.broadcast_to(np.asarray(self.ell_inf, dtype=float), (N,)).copy()
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (N,)).copy()
        self.b = np.asarray(self.b, dtype=float).reshape(N, N)
        for name in ("kappa_p", "vbar_p", "sigma_p"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(N) if v is None else np.broadcast_to(np.asarray(v, dtype=float), (N,)).copy())

    @property
    def N(self) -> int:
        return len(self.K)

    @property
    def G(self) -> np.ndarray:
        """Branching matrix ``b[j, k] / alpha[j]``."""
        return self.b / self.alpha[:, None]


@dataclass
class EconomyConfig:
    S: HorizonConfig
    L: HorizonConfig
    rho_SL: float = 0.0
    rho_W_S: float = 0.0
    rho_W_L: float = 0.0
    mu_p: np.ndarray | None = None
    delta: float = 0.02
    gamma: float = 2.0
    eta: float = 6.0
    D0: tuple = (1.0, 1.0)
    v0: tuple | None = None
    extra_correlations: dict = field(default_factory=dict)
    covariance_factor: float = 1.0
    consumption: str = "sum"

    def __post_init__(self):
        if self.S.N != self.L.N:
            raise EconomyConfigError("S and L horizons must have the same number of nodes")
        self.mu_p = np.zeros(self.N) if self.mu_p is None else np.broadcast_to(
            np.asarray(self.mu_p, dtype=float), (self.N,)).copy()
        if self.consumption not in ("sum", "share"):
            raise EconomyConfigError("consumption must be 'sum' or 'share'")
        if self.covariance_factor not in (1, 2, 1.0, 2.0):
            raise EconomyConfigError("covariance_factor must be 1 or 2")
        for lab, h in (("S", self.S), ("L", self.L)):
            for name in ("kappa_v", "vbar", "sigma_v", "Q"):
                if getattr(h, name) < 0:
                    raise EconomyConfigError(f"{lab}.{name} must be nonnegative")
            for name in ("K", "ell_inf", "b", "vbar_p", "sigma_p", "kappa_p"):
                if np.any(getattr(h, name) < 0):
                    raise EconomyConfigError(f"{lab}.{name} must be nonnegative")
            if np.any(h.alpha <= 0):
                raise EconomyConfigError(f"{lab}.alpha must be positive")
            r = spectral_radius(h.G)
            if r >= 1:
                raise StationarityError(f"horizon {lab}: spectral radius of G is {r:.4f} >= 1")
        if not self.L.mu > self.S.mu > 0:
            warnings.warn("expected mu_L > mu_S > 0", stacklevel=2)
        if not self.L.Q > self.S.Q > 0:
            warnings.warn("expected Q_L > Q_S > 0", stacklevel=2)
        self.correlation_matrix()

    @property
    def N(self) -> int:
        return self.S.N

    def horizon(self, iota: str) -> HorizonConfig:
        if iota not in ("S", "L"):
            raise EconomyConfigError("horizon must be 'S' or 'L'")
        return getattr(self, iota)

    def correlation_matrix(self) -> np.ndarray:
        C = np.eye(8)
        pairs = {("Z_S", "Z_L"): self.rho_SL, ("W_S", "W_S1"): self.rho_W_S, ("W_L", "W_L1"): self.rho_W_L}
        for key, val in self.extra_correlations.items():
            a, b = key.split(",") if isinstance(key, str) else key
            if ({a.strip(), b.strip()} == {"W_S", "W_L1"}) or ({a.strip(), b.strip()} == {"W_L", "W_S1"}):
                raise EconomyConfigError(f"correlation {a}-{b} is fixed at 0")
            pairs[(a.strip(), b.strip())] = val
        for (a, b), v in pairs.items():
            try:
                i, j = BROWNIAN_ORDER.index(a), BROWNIAN_ORDER.index(b)
            except ValueError:
                raise EconomyConfigError(f"unknown Brownian motion in pair ({a}, {b})") from None
            if not -1 <= v <= 1:
                raise EconomyConfigError(f"correlation {a}-{b} outside [-1, 1]")
            C[i, j] = C[j, i] = v
        if np.linalg.eigvalsh(C).min() < -1e-12:
            raise EconomyConfigError("correlation matrix is not positive semidefinite")
        return C

    def brownian_factor(self) -> np.ndarray:
        """``L`` with ``L L' = C`` (works for singular ``C``)."""
        w, V = np.linalg.eigh(self.correlation_matrix())
        return V * np.sqrt(np.clip(w, 0, None))

    def initial_variances(self) -> tuple[float, float]:
        return tuple(self.v0) if self.v0 is not None else (self.S.vbar, self.L.vbar)


def spectral_radius(G: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(G)).max())


# ---------------------------------------------------------------------------
# Hawkes


def stationary_intensity(config, iota: str = "S") -> np.ndarray:
    """Solve ``(I - G) ell = ell_inf``."""
    h = config.horizon(iota) if isinstance(config, EconomyConfig) else config
    r = spectral_radius(h.G)
    if r >= 1:
        raise StationarityError(f"spectral radius of G is {r:.4f} >= 1")
    return np.linalg.solve(np.eye(h.N) - h.G, h.ell_inf)


@dataclass
class HawkesPath:
    times: np.ndarray
    nodes: np.ndarray
    horizon: float
    ell0: np.ndarray
    ell_inf: np.ndarray
    alpha: np.ndarray
    b: np.ndarray

    def events(self, j: int) -> np.ndarray:
        return self.times[self.nodes == j]

    def counts(self) -> np.ndarray:
        return np.bincount(self.nodes, minlength=len(self.alpha))

    def intensity(self, t) -> np.ndarray:
        """Intensities just after time(s) ``t`` rebuilt from the event history."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = self.ell_inf + (self.ell0 - self.ell_inf) * np.exp(-np.outer(t, self.alpha))
        for s, k in zip(self.times, self.nodes):
            live = t >= s
            out[live] += self.b[:, k] * np.exp(-np.outer(t[live] - s, self.alpha))
        return out


def simulate_hawkes(config, iota: str, horizon: float, seed=None, ell0=None) -> HawkesPath:
    """Ogata thinning with exact exponential decay between events.

    The initial intensity defaults to the stationary mean, so the expected
    intensity is constant in time.
    """
    h = config.horizon(iota) if isinstance(config, EconomyConfig) else config
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam_inf, a, b = h.ell_inf, h.alpha, h.b
    lam0 = stationary_intensity(h) if ell0 is None else np.asarray(ell0, dtype=float)
    lam = lam0.copy()
    t = 0.0
    times, nodes = [], []
    while True:
        bound = np.maximum(lam, lam_inf).sum()
        if bound <= 0:
            break
        w = rng.exponential(1.0 / bound)
        if t + w > horizon:
            break
        lam = lam_inf + (lam - lam_inf) * np.exp(-a * w)
        t += w
        total = lam.sum()
        u = rng.uniform() * bound
        if u <= total:
            k = int(np.searchsorted(np.cumsum(lam), u, side="left"))
            k = min(k, len(lam) - 1)
            times.append(t)
            nodes.append(k)
            lam = lam + b[:, k]
    return HawkesPath(np.array(times), np.array(nodes, dtype=int), horizon, lam0, lam_inf, a, b)


def batch_mean_rate(path: HawkesPath, n_batches: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Event rate per node and its batch-means standard error."""
    edges = np.linspace(0, path.horizon, n_batches + 1)
    width = edges[1] - edges[0]
    rates = np.zeros((n_batches, len(path.alpha)))
    idx = np.minimum((path.times // width).astype(int), n_batches - 1)
    np.add.at(rates, (idx, path.nodes), 1.0)
    rates /= width
    return rates.mean(axis=0), rates.std(axis=0, ddof=1) / math.sqrt(n_batches)


# ---------------------------------------------------------------------------
# moments and pricing kernel


def _state(s, v_S, v_L):
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("s must lie in [0, 1]")
    return s, np.asarray(v_S, dtype=float), np.asarray(v_L, dtype=float)


def consumption_moments(s, v_S, v_L, config: EconomyConfig, covariance_factor: float | None = None):
    """Instantaneous mean and variance rates of consumption growth.

    mean = s mu_S + (1 - s) mu_L,
    var  = s^2 v_S + (1 - s)^2 v_L + c s (1 - s) sqrt(v_S v_L) rho_SL,
    with ``c = config.covariance_factor`` unless overridden.
    """
    s, vS, vL = _state(s, v_S, v_L)
    c = config.covariance_factor if covariance_factor is None else covariance_factor
    mean = s * config.S.mu + (1 - s) * config.L.mu
    var = s**2 * vS + (1 - s) ** 2 * vL + c * s * (1 - s) * np.sqrt(vS) * np.sqrt(vL) * config.rho_SL
    return mean, var


def risk_free_rate(s, v_S, v_L, config: EconomyConfig):
    mean, var = consumption_moments(s, v_S, v_L, config)
    return config.delta + config.gamma * mean - 0.5 * config.eta * var


def sdf_innovation(s, v_S, v_L, config: EconomyConfig):
    """Expected ``dLambda / Lambda`` per unit time."""
    mean, var = consumption_moments(s, v_S, v_L, config)
    return -config.delta - config.gamma * mean + 0.5 * config.eta * var


def share_drift(s, v_S, v_L, config: EconomyConfig):
    """Drift and the loadings on ``dZ_S``, ``dZ_L`` of the consumption share."""
    s, vS, vL = _state(s, v_S, v_L)
    q = s * (1 - s)
    drift = q * (
        config.S.mu - config.L.mu - s * vS + (1 - s) * vL + 2 * (s - 0.5) * np.sqrt(vS) * np.sqrt(vL) * config.rho_SL
    )
    return drift, (q * np.sqrt(vS), -q * np.sqrt(vL))


# ---------------------------------------------------------------------------
# path simulation


@dataclass
class SimPath:
    t: np.ndarray
    D_S: np.ndarray
    D_L: np.ndarray
    v_S: np.ndarray
    v_L: np.ndarray
    s: np.ndarray
    c: np.ndarray
    p: np.ndarray
    v_pS: np.ndarray
    v_pL: np.ndarray
    ell_S: np.ndarray | None
    ell_L: np.ndarray | None
    jumps_S: HawkesPath | None
    jumps_L: HawkesPath | None


@dataclass
class SimBatch:
    """Simulated paths stacked on axis 0."""

    t: np.ndarray
    D_S: np.ndarray
    D_L: np.ndarray
    v_S: np.ndarray
    v_L: np.ndarray
    s: np.ndarray
    c: np.ndarray
    p: np.ndarray
    v_pS: np.ndarray
    v_pL: np.ndarray
    ell_S: np.ndarray | None = None
    ell_L: np.ndarray | None = None
    hawkes_S: list | None = None
    hawkes_L: list | None = None

    @property
    def n_paths(self) -> int:
        return self.D_S.shape[0]

    def __len__(self) -> int:
        return self.n_paths

    def path(self, i: int) -> SimPath:
        pick = lambda a: None if a is None else a[i]  # noqa: E731
        return SimPath(
            self.t, self.D_S[i], self.D_L[i], self.v_S[i], self.v_L[i], self.s[i], self.c[i], self.p[i],
            self.v_pS[i], self.v_pL[i], pick(self.ell_S), pick(self.ell_L), pick(self.hawkes_S), pick(self.hawkes_L),
        )


def _grid_intensity(hp: HawkesPath, n_steps: int, dt: float) -> np.ndarray:
    grid = np.arange(n_steps + 1) * dt
    out = hp.ell_inf + (hp.ell0 - hp.ell_inf) * np.exp(-np.outer(grid, hp.alpha))
    if len(hp.times):
        idx = np.minimum(np.ceil(hp.times / dt - 1e-12).astype(int), n_steps)
        for s, k, i in zip(hp.times, hp.nodes, idx):
            out[i:] += hp.b[:, k] * np.exp(-np.outer(grid[i:] - s, hp.alpha))
    return out


def _simulate_block(config: EconomyConfig, paths, n_steps: int, dt: float, seed: int, keep_hawkes: bool,
                    keep_intensity: bool):
    n = len(paths)
    N = config.N
    horizon = n_steps * dt
    Lc = config.brownian_factor()
    Z = np.empty((n, n_steps, 8))
    counts = {lab: np.zeros((n, n_steps, N)) for lab in ("S", "L")}
    hawkes = {"S": [], "L": []}
    ells = {"S": [], "L": []}
    ell0 = {lab: stationary_intensity(config, lab) for lab in ("S", "L")}
    for r, i in enumerate(paths):
        rng = substream(seed, "econ", i)
        Z[r] = rng.standard_normal((n_steps, 8))
        for lab in ("S", "L"):
            hp = simulate_hawkes(config, lab, horizon, rng, ell0[lab])
            if len(hp.times):
                step = np.minimum((hp.times / dt).astype(int), n_steps - 1)
                np.add.at(counts[lab][r], (step, hp.nodes), 1.0)
            if keep_hawkes:
                hawkes[lab].append(hp)
            if keep_intensity:
                ells[lab].append(_grid_intensity(hp, n_steps, dt))
    dB = math.sqrt(dt) * Z @ Lc.T
    S, Lh = config.S, config.L
    vS0, vL0 = config.initial_variances()
    logDS = np.full(n, math.log(config.D0[0]))
    logDL = np.full(n, math.log(config.D0[1]))
    vS = np.full(n, float(vS0))
    vL = np.full(n, float(vL0))
    vpS = np.tile(S.vbar_p, (n, 1))
    vpL = np.tile(Lh.vbar_p, (n, 1))
    logp = np.zeros((n, N))
    shape = (n, n_steps + 1)
    out = {k: np.empty(shape) for k in ("D_S", "D_L", "v_S", "v_L")}
    out_p = {k: np.empty(shape + (N,)) for k in ("p", "v_pS", "v_pL")}

    def record(i):
        out["D_S"][:, i] = np.exp(logDS)
        out["D_L"][:, i] = np.exp(logDL)
        out["v_S"][:, i] = np.maximum(vS, 0)
        out["v_L"][:, i] = np.maximum(vL, 0)
        out_p["p"][:, i] = np.exp(logp)
        out_p["v_pS"][:, i] = np.maximum(vpS, 0)
        out_p["v_pL"][:, i] = np.maximum(vpL, 0)

    record(0)
    for i in range(n_steps):
        d = dB[:, i]
        a_S, a_L = np.maximum(vS, 0), np.maximum(vL, 0)
        ap_S, ap_L = np.maximum(vpS, 0), np.maximum(vpL, 0)
        logDS += (S.mu - 0.5 * a_S) * dt + np.sqrt(a_S) * d[:, 0]
        logDL += (Lh.mu - 0.5 * a_L) * dt + np.sqrt(a_L) * d[:, 1]
        vS += S.kappa_v * (S.vbar - a_S) * dt + S.sigma_v * np.sqrt(a_S) * d[:, 2] + counts["S"][:, i] @ S.K
        vL += Lh.kappa_v * (Lh.vbar - a_L) * dt + Lh.sigma_v * np.sqrt(a_L) * d[:, 3] + counts["L"][:, i] @ Lh.K
        logp += (config.mu_p - 0.5 * (ap_S + ap_L)) * dt + np.sqrt(ap_S) * d[:, 4:5] + np.sqrt(ap_L) * d[:, 5:6]
        vpS += S.kappa_p * (S.vbar_p - ap_S) * dt + S.sigma_p * np.sqrt(ap_S) * d[:, 6:7] + S.Q * counts["S"][:, i]
        vpL += Lh.kappa_p * (Lh.vbar_p - ap_L) * dt + Lh.sigma_p * np.sqrt(ap_L) * d[:, 7:8] + Lh.Q * counts["L"][:, i]
        record(i + 1)
    res = dict(out, **out_p)
    if keep_intensity:
        res["ell_S"] = np.stack(ells["S"])
        res["ell_L"] = np.stack(ells["L"])
    if keep_hawkes:
        res["hawkes_S"], res["hawkes_L"] = hawkes["S"], hawkes["L"]
    return res


def simulate_economy(config: EconomyConfig, n_paths: int, horizon: float, dt: float = 1e-3, seed: int = 0,
                     workers: int = 1, keep_hawkes: bool = False, keep_intensity: bool = False,
                     block: int = 4096) -> SimBatch:
    """Simulate ``n_paths`` independent paths on ``[0, horizon]``.

    Path ``i`` draws its Brownian increments and Hawkes events from
    substreams keyed by ``(seed, i)``, so results do not depend on
    ``workers`` or ``block``.
    """
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise EconomyConfigError("horizon must cover at least one step")
    max_int = max(stationary_intensity(config, "S").max(), stationary_intensity(config, "L").max())
    if dt * max_int >= 0.1:
        warnings.warn(f"dt * intensity = {dt * max_int:.3f} >= 0.1; consider a smaller dt", stacklevel=2)
    blocks = [list(range(s, min(s + block, n_paths))) for s in range(0, n_paths, block)]
    args = (n_steps, dt, seed, keep_hawkes, keep_intensity)
    if workers <= 1 or len(blocks) == 1:
        parts = [_simulate_block(config, b, *args) for b in blocks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_block, [config] * len(blocks), blocks, *[[a] * len(blocks) for a in args]))
    cat = {}
    for k in parts[0]:
        if isinstance(parts[0][k], list):
            cat[k] = [x for p in parts for x in p[k]]
        else:
            cat[k] = np.concatenate([p[k] for p in parts])
    DS, DL = cat["D_S"], cat["D_L"]
    s = DS / (DS + DL)
    c = DS + DL if config.consumption == "sum" else s * DS + (1 - s) * DL
    return SimBatch(t=np.arange(n_steps + 1) * dt, s=s, c=c, **cat)


# ---------------------------------------------------------------------------
# verification helpers


def moment_check(config: EconomyConfig, s: float, v_S: float, v_L: float, n_paths: int = 100_000, dt: float = 1e-3,
                 seed: int = 0, covariance_factor: float | None = None) -> dict:
    """Monte-Carlo one-step mean and second moment of ``dc/c`` against the formulas.

    Rates are per unit time; ``se`` are Monte-Carlo standard errors of the
    rates and ``z`` the standardized differences.
    """
    import dataclasses

    cfg = dataclasses.replace(config, D0=(s, 1 - s), v0=(v_S, v_L))
    sim = simulate_economy(cfg, n_paths, dt, dt, seed)
    g = sim.c[:, 1] / sim.c[:, 0] - 1.0
    mean_f, var_f = consumption_moments(s, v_S, v_L, config, covariance_factor)
    m_hat = g.mean() / dt
    m_se = g.std(ddof=1) / math.sqrt(n_paths) / dt
    q = g**2
    v_hat = q.mean() / dt
    v_se = q.std(ddof=1) / math.sqrt(n_paths) / dt
    return {
        "mean_mc": m_hat,
        "mean_se": m_se,
        "mean_formula": float(mean_f),
        "mean_z": (m_hat - mean_f) / m_se,
        "var_mc": v_hat,
        "var_se": v_se,
        "var_formula": float(var_f),
        "var_z": (v_hat - var_f) / v_se,
    }


def share_euler_error(config: EconomyConfig, s0: float, horizon: float, dt: float, n_paths: int = 2000,
                      seed: int = 0) -> float:
    """RMS gap at ``horizon`` between an Euler scheme for ``s`` and ``D_S / (D_S + D_L)``.

    Variances are frozen at their long-run levels and dividends evolve by
    exact log-normal steps, so the gap is the Euler discretization error of
    the share equation.  Brownian increments are built from a fine base grid
    so different ``dt`` share the same paths.
    """
    vS, vL = config.S.vbar, config.L.vbar
    n = int(round(horizon / dt))
    rng = substream(seed, "econ", "share")
    base = 1024
    if base % n:
        raise ValueError("horizon / dt must divide 1024")
    C = np.array([[1.0, config.rho_SL], [config.rho_SL, 1.0]])
    L = np.linalg.cholesky(C + 1e-15 * np.eye(2))
    fine = rng.standard_normal((n_paths, base, 2)) @ L.T * math.sqrt(horizon / base)
    dZ = fine.reshape(n_paths, n, base // n, 2).sum(axis=2)
    DS = np.full(n_paths, s0)
    DL = np.full(n_paths, 1 - s0)
    s = np.full(n_paths, s0)
    for i in range(n):
        dr, (gS, gL) = share_drift(np.clip(s, 0, 1), vS, vL, config)
        s = s + dr * dt + gS * dZ[:, i, 0] + gL * dZ[:, i, 1]
        DS = DS * np.exp((config.S.mu - 0.5 * vS) * dt + math.sqrt(vS) * dZ[:, i, 0])
        DL = DL * np.exp((config.L.mu - 0.5 * vL) * dt + math.sqrt(vL) * dZ[:, i, 1])
    exact = DS / (DS + DL)
    return float(np.sqrt(np.mean((s - exact) ** 2)))


def default_config(N: int = 3, rho_SL: float = 0.3) -> EconomyConfig:
    """Small sub-critical economy used by the demo and the tests."""
    b = np.full((N, N), 0.1) + 0.2 * np.eye(N)
    S = HorizonConfig(mu=0.01, kappa_v=5.0, vbar=0.02, sigma_v=0.2, K=np.full(N, 0.005), ell_inf=np.full(N, 0.5),
                      alpha=np.full(N, 2.0), b=b, Q=0.002, kappa_p=np.full(N, 5.0), vbar_p=np.full(N, 0.03),
                      sigma_p=np.full(N, 0.2))
    L = HorizonConfig(mu=0.02, kappa_v=1.0, vbar=0.01, sigma_v=0.1, K=np.full(N, 0.01), ell_inf=np.full(N, 0.2),
                      alpha=np.full(N, 1.0), b=0.5 * b, Q=0.004, kappa_p=np.full(N, 1.0), vbar_p=np.full(N, 0.02),
                      sigma_p=np.full(N, 0.1))
    return EconomyConfig(S=S, L=L, rho_SL=rho_SL, mu_p=np.full(N, 0.05))
