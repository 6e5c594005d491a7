"""Quasi-Bayesian local-likelihood estimation of a locally stationary TVP-VAR.

At each target time ``k`` the VAR likelihood is reweighted by a Gaussian
kernel centred on ``k`` and combined with a conjugate Normal-Wishart prior,
which gives a closed-form Normal-Wishart quasi-posterior.  Coefficients are
stored as a ``(K, N)`` matrix ``B`` with ``K = 1 + N p`` regressors per
equation: row 0 is the intercept and row ``1 + (l - 1) N + j`` the lag-``l``
coefficient on variable ``j``.  Column ``i`` is equation ``i``.

Covariance draws: the Wishart is placed on the precision matrix, so
``Sigma^{-1} ~ W(alpha_tilde, Gamma_tilde^{-1})`` and ``Sigma`` is its inverse
(inverse-Wishart with scale ``Gamma_tilde``).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from ._rng import substream

logger = logging.getLogger(__name__)

WeightScale = Literal["raw", "normalized"]


class QBLLError(ValueError):
    """Invalid estimation input."""


class QBLLNumericalError(ArithmeticError):
    """Numerical failure (singular precision, failed Cholesky)."""


# ---------------------------------------------------------------------------
# kernel weights


@dataclass(frozen=True)
class KernelWeights:
    k: int
    T: int
    bandwidth: float
    w: np.ndarray
    rho: np.ndarray
    zeta: float

    @classmethod
    def uniform(cls, T: int) -> "KernelWeights":
        """Flat weights (every observation counts once)."""
        ones = np.ones(T)
        return cls(k=0, T=T, bandwidth=math.inf, w=ones, rho=ones, zeta=1.0 / T**2)


def default_bandwidth(T: int) -> float:
    return float(max(1, math.isqrt(T)))


def kernel_weights(k: int, T: int, bandwidth: float, scale: WeightScale | float = "raw") -> KernelWeights:
    """Normal-kernel weights ``w[t]`` for ``t = 1..T`` centred on ``k``.

    ``scale`` fixes the multiplier in ``rho = scale * w / sum(w)``:
    ``"raw"`` uses ``sum(w)`` so ``rho = w``; ``"normalized"`` uses 1.
    """
    if bandwidth <= 0 or not np.isfinite(bandwidth):
        raise QBLLError(f"bandwidth must be positive and finite, got {bandwidth}")
    if not 1 <= k <= T:
        raise QBLLError(f"k={k} outside 1..{T}")
    t = np.arange(1, T + 1)
    w = np.exp(-0.5 * ((k - t) / bandwidth) ** 2) / math.sqrt(2 * math.pi)
    total = w.sum()
    if scale == "raw":
        rho = w.copy()
    elif scale == "normalized":
        rho = w / total
    else:
        rho = float(scale) * w / total
    return KernelWeights(k=k, T=T, bandwidth=float(bandwidth), w=w, rho=rho, zeta=float(total**-2))


# ---------------------------------------------------------------------------
# prior


@dataclass
class PriorSpec:
    """Normal-Wishart prior: ``vec(B) | Sigma ~ N(vec(B0), Sigma (x) Xi0^{-1})``."""

    B0: np.ndarray
    Xi0: np.ndarray
    alpha0: float
    Gamma0: np.ndarray

    def __post_init__(self):
        self.B0 = np.atleast_2d(np.asarray(self.B0, dtype=float))
        self.Xi0 = np.atleast_2d(np.asarray(self.Xi0, dtype=float))
        self.Gamma0 = np.atleast_2d(np.asarray(self.Gamma0, dtype=float))
        K, N = self.B0.shape
        if self.Xi0.shape != (K, K) or self.Gamma0.shape != (N, N):
            raise QBLLError("prior dimensions inconsistent")
        if not np.allclose(self.Xi0, self.Xi0.T) or not np.allclose(self.Gamma0, self.Gamma0.T):
            raise QBLLError("Xi0 and Gamma0 must be symmetric")
        if np.linalg.eigvalsh(self.Xi0).min() < -1e-12 * max(1.0, np.abs(self.Xi0).max()):
            raise QBLLError("Xi0 must be positive semidefinite")
        if np.linalg.eigvalsh(self.Gamma0).min() <= 0:
            raise QBLLError("Gamma0 must be positive definite")
        if self.alpha0 <= N - 1:
            raise QBLLError(f"alpha0 must exceed N - 1 = {N - 1}")

    @property
    def N(self) -> int:
        return self.B0.shape[1]

    @property
    def phi0(self) -> np.ndarray:
        """Prior mean stacked equation by equation."""
        return self.B0.reshape(-1, order="F")

    @classmethod
    def diffuse(cls, N: int, p: int, scale: float = 1.0) -> "PriorSpec":
        K = 1 + N * p
        return cls(np.zeros((K, N)), np.zeros((K, K)), N + 2.0, scale * np.eye(N))


def build_regressors(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked regressors ``A`` (rows ``t = p+1..T``) and responses ``Y``."""
    y = np.asarray(y, dtype=float)
    T, N = y.shape
    if T <= p:
        raise QBLLError(f"need more than p={p} observations")
    lags = [y[p - l : T - l] for l in range(1, p + 1)]
    A = np.column_stack([np.ones(T - p)] + lags)
    return A, y[p:]


def ar_residual_variances(y: np.ndarray, p: int) -> np.ndarray:
    """Residual variances of univariate AR(p) fits with intercept."""
    y = np.asarray(y, dtype=float)
    T, N = y.shape
    out = np.empty(N)
    for i in range(N):
        A, Y = build_regressors(y[:, [i]], p)
        if len(Y) <= A.shape[1]:
            raise QBLLError(f"asset {i}: too few observations for AR({p})")
        coef, *_ = np.linalg.lstsq(A, Y[:, 0], rcond=None)
        resid = Y[:, 0] - A @ coef
        out[i] = resid @ resid / (len(Y) - A.shape[1])
    return out


def minnesota_prior(
    y=None,
    p: int = 2,
    shrinkage: float = 0.05,
    own_lag_mean: float = 0.1,
    residual_variances: np.ndarray | None = None,
    intercept_scale: float = 100.0,
    asset_ids: Sequence[str] | None = None,
) -> PriorSpec:
    """Minnesota-style Normal-Wishart prior.

    The first own lag of every equation is centred at ``own_lag_mean``, all
    other coefficients at 0.  Lag ``l`` of variable ``j`` gets prior precision
    ``l^2 s_j^2 / shrinkage^2``; the intercept gets ``(shrinkage *
    intercept_scale)^-2``.  Wishart degrees ``alpha0 = N + 2`` and scale
    ``Gamma0 = (alpha0 - N - 1) diag(s^2)`` so the prior mean of ``Sigma`` is
    ``diag(s^2)``.  ``s_j^2`` are AR(p) residual variances of ``y`` unless
    given directly.
    """
    if shrinkage <= 0:
        raise QBLLError("shrinkage must be positive")
    if residual_variances is None:
        if y is None:
            raise QBLLError("need data or residual variances")
        values = y.rv if hasattr(y, "rv") else y
        if asset_ids is None and hasattr(y, "asset_ids"):
            asset_ids = y.asset_ids
        s2 = ar_residual_variances(values, p)
    else:
        s2 = np.asarray(residual_variances, dtype=float).ravel()
    for i, v in enumerate(s2):
        if not np.isfinite(v) or v <= 0:
            name = asset_ids[i] if asset_ids is not None else i
            raise QBLLError(f"non-finite or non-positive residual variance for asset {name}")
    N = len(s2)
    K = 1 + N * p
    B0 = np.zeros((K, N))
    B0[1 + np.arange(N), np.arange(N)] = own_lag_mean
    prec = np.empty(K)
    prec[0] = (shrinkage * intercept_scale) ** -2
    for l in range(1, p + 1):
        prec[1 + (l - 1) * N : 1 + l * N] = l**2 * s2 / shrinkage**2
    alpha0 = N + 2.0
    Gamma0 = (alpha0 - N - 1) * np.diag(s2)
    return PriorSpec(B0, np.diag(prec), alpha0, Gamma0)


# ---------------------------------------------------------------------------
# posterior


@dataclass
class LocalPosterior:
    k: int
    p: int
    B_tilde: np.ndarray
    Xi_tilde: np.ndarray
    alpha_tilde: float
    Gamma_tilde: np.ndarray
    condition_number: float = float("nan")

    @property
    def N(self) -> int:
        return self.B_tilde.shape[1]

    @property
    def phi_tilde(self) -> np.ndarray:
        return self.B_tilde.reshape(-1, order="F")

    def coefficient_sd(self) -> np.ndarray:
        """Marginal posterior sd of each entry of ``B`` (Student-t moments)."""
        N = self.N
        dof = self.alpha_tilde - N - 1
        if dof <= 0:
            raise QBLLNumericalError("posterior mean of Sigma undefined (alpha_tilde <= N + 1)")
        sigma_mean = np.diag(self.Gamma_tilde) / dof
        xi_inv = np.diag(np.linalg.inv(self.Xi_tilde))
        return np.sqrt(np.outer(xi_inv, sigma_mean))


def _values(panel) -> np.ndarray:
    y = panel.rv if hasattr(panel, "rv") else panel
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise QBLLError("panel must be (T, N)")
    if not np.isfinite(y).all():
        raise QBLLError("panel must be balanced (no missing values)")
    return y


def local_posterior(panel, k: int, prior: PriorSpec, weights: KernelWeights, p: int) -> LocalPosterior:
    """Normal-Wishart quasi-posterior at time ``k``.

    ``Xi~ = Xi0 + A'DA``, ``B~ = Xi~^{-1}(A'DY + Xi0 B0)``,
    ``alpha~ = alpha0 + sum(rho)``,
    ``Gamma~ = Gamma0 + Y'DY + B0'Xi0 B0 - B~'Xi~ B~``, with ``D`` the kernel
    weights of the usable rows ``t = p+1..T``.
    """
    y = _values(panel)
    T, N = y.shape
    K = 1 + N * p
    if T - p < K:
        raise QBLLError(f"need at least {K} usable observations, have {T - p}")
    if prior.B0.shape != (K, N):
        raise QBLLError("prior does not match (N, p)")
    if len(weights.rho) != T:
        raise QBLLError("weights length does not match panel")
    A, Y = build_regressors(y, p)
    d = weights.rho[p:]
    Ad = A * d[:, None]
    AtDA = A.T @ Ad
    Xi = prior.Xi0 + AtDA
    Xi = 0.5 * (Xi + Xi.T)
    cond = float(np.linalg.cond(Xi))
    if not np.isfinite(cond) or cond > 1e14:
        raise QBLLNumericalError(f"k={k}: posterior precision is singular (condition number {cond:.3g})")
    rhs = Ad.T @ Y + prior.Xi0 @ prior.B0
    B = np.linalg.solve(Xi, rhs)
    Yd = Y * d[:, None]
    Gamma = prior.Gamma0 + Y.T @ Yd + prior.B0.T @ prior.Xi0 @ prior.B0 - B.T @ Xi @ B
    Gamma = 0.5 * (Gamma + Gamma.T)
    return LocalPosterior(
        k=k,
        p=p,
        B_tilde=B,
        Xi_tilde=Xi,
        alpha_tilde=float(prior.alpha0 + d.sum()),
        Gamma_tilde=Gamma,
        condition_number=cond,
    )


# ---------------------------------------------------------------------------
# draws


@dataclass
class CoefficientDraw:
    Phi: np.ndarray
    intercept: np.ndarray
    Sigma: np.ndarray
    draw_id: int = 0
    u: float = float("nan")
    stable: bool = True

    @property
    def p(self) -> int:
        return self.Phi.shape[0]

    @property
    def N(self) -> int:
        return self.Phi.shape[1]


def coefficients_to_lags(B: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``B`` (``(..., K, N)``) into intercepts and lag matrices ``(..., p, N, N)``."""
    N = B.shape[-1]
    intercept = B[..., 0, :]
    lag_rows = B[..., 1:, :].reshape(B.shape[:-2] + (p, N, N))
    # rows index regressors (lag, variable), columns equations: transpose to Phi[l][eq, var]
    return intercept, np.swapaxes(lag_rows, -1, -2)


def companion_radius(Phi: np.ndarray) -> np.ndarray:
    """Spectral radius of the companion matrix for ``Phi`` of shape ``(..., p, N, N)``."""
    Phi = np.asarray(Phi)
    p, N = Phi.shape[-3], Phi.shape[-1]
    batch = Phi.shape[:-3]
    C = np.zeros(batch + (N * p, N * p))
    C[..., :N, :] = np.concatenate([Phi[..., l, :, :] for l in range(p)], axis=-1)
    if p > 1:
        C[..., N:, : N * (p - 1)] = np.eye(N * (p - 1))
    return np.abs(np.linalg.eigvals(C)).max(axis=-1)


@dataclass
class DrawArrays:
    """Posterior draws at one time point, batched over the draw axis."""

    Phi: np.ndarray
    intercept: np.ndarray
    Sigma: np.ndarray
    stable: np.ndarray

    def as_draws(self, u: float = float("nan")) -> list[CoefficientDraw]:
        return [
            CoefficientDraw(self.Phi[i], self.intercept[i], self.Sigma[i], i, u, bool(self.stable[i]))
            for i in range(len(self.stable))
        ]


def _draw_arrays(post: LocalPosterior, n_draws: int, rng: np.random.Generator, reject_unstable: bool = False,
                 max_tries: int = 100) -> DrawArrays:
    if n_draws < 1:
        raise QBLLError("n_draws must be >= 1")
    N, K, p = post.N, post.B_tilde.shape[0], post.p
    try:
        gamma_inv = np.linalg.inv(post.Gamma_tilde)
        np.linalg.cholesky(post.Gamma_tilde)
        xi_inv_chol = np.linalg.cholesky(np.linalg.inv(post.Xi_tilde))
    except np.linalg.LinAlgError as exc:
        raise QBLLNumericalError(f"k={post.k}: Cholesky failed ({exc})") from None
    gamma_inv = 0.5 * (gamma_inv + gamma_inv.T)

    def one_batch(n):
        prec = stats.wishart(df=post.alpha_tilde, scale=gamma_inv).rvs(size=n, random_state=rng)
        prec = np.reshape(prec, (n, N, N))
        Sigma = np.linalg.inv(prec)
        Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
        try:
            L = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise QBLLNumericalError(f"k={post.k}: Cholesky of Sigma draw failed ({exc})") from None
        Z = rng.standard_normal((n, K, N))
        B = post.B_tilde + xi_inv_chol @ Z @ np.swapaxes(L, -1, -2)
        c, Phi = coefficients_to_lags(B, p)
        return Phi, c, Sigma, companion_radius(Phi) < 1.0

    Phi, c, Sigma, stable = one_batch(n_draws)
    if reject_unstable:
        tries = 0
        while not stable.all():
            tries += 1
            if tries > max_tries:
                raise QBLLNumericalError(f"k={post.k}: could not obtain {n_draws} stable draws")
            bad = np.nonzero(~stable)[0]
            P2, c2, S2, st2 = one_batch(len(bad))
            Phi[bad], c[bad], Sigma[bad], stable[bad] = P2, c2, S2, st2
    return DrawArrays(Phi, c, Sigma, stable)


def draw_posterior(post: LocalPosterior, n_draws: int, seed=None, reject_unstable: bool = False,
                   u: float = float("nan")) -> list[CoefficientDraw]:
    """Draw ``(Phi, Sigma)`` from the Normal-Wishart quasi-posterior.

    ``seed`` may be an int or a ``numpy.random.Generator``.  Unstable draws
    (companion spectral radius >= 1) are kept and flagged unless
    ``reject_unstable`` is set.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _draw_arrays(post, n_draws, rng, reject_unstable).as_draws(u)


# ---------------------------------------------------------------------------
# path estimation


@dataclass
class QBLLConfig:
    p: int = 2
    shrinkage: float = 0.05
    own_lag_mean: float = 0.1
    bandwidth: float | None = None
    n_draws: int = 500
    seed: int = 0
    weight_scale: str = "raw"
    intercept_scale: float = 100.0
    reject_unstable: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorField:
    """Posteriors and draws at each estimated time point."""

    ks: np.ndarray
    T: int
    posteriors: list[LocalPosterior]
    Phi: np.ndarray
    intercept: np.ndarray
    Sigma: np.ndarray
    stable: np.ndarray
    dates: list | None = None
    config: dict = field(default_factory=dict)

    def draws_at(self, i: int) -> DrawArrays:
        return DrawArrays(self.Phi[i], self.intercept[i], self.Sigma[i], self.stable[i])

    def save(self, directory) -> None:
        """Raw ``.npy`` arrays plus an index CSV (byte-deterministic)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("Phi", "intercept", "Sigma", "stable"):
            np.save(d / f"{name}.npy", getattr(self, name))
        np.save(d / "B_tilde.npy", np.stack([q.B_tilde for q in self.posteriors]))
        np.save(d / "Xi_tilde.npy", np.stack([q.Xi_tilde for q in self.posteriors]))
        np.save(d / "Gamma_tilde.npy", np.stack([q.Gamma_tilde for q in self.posteriors]))
        idx = pd.DataFrame(
            {
                "k": self.ks,
                "date": [str(self.dates[k - 1]) if self.dates is not None else "" for k in self.ks],
                "alpha_tilde": [q.alpha_tilde for q in self.posteriors],
                "condition_number": [q.condition_number for q in self.posteriors],
                "n_stable": self.stable.sum(axis=1),
            }
        )
        idx.to_csv(d / "index.csv", index=False, float_format="%.17g")
        meta = dict(self.config, T=self.T)
        pd.Series(meta, dtype=object).to_csv(d / "config.csv", header=False)

    @classmethod
    def load(cls, directory, dates=None) -> "PosteriorField":
        d = Path(directory)
        idx = pd.read_csv(d / "index.csv")
        meta = pd.read_csv(d / "config.csv", header=None, index_col=0).iloc[:, 0].to_dict()
        p = int(meta["p"])
        Bs, Xis, Gs = (np.load(d / f"{n}.npy") for n in ("B_tilde", "Xi_tilde", "Gamma_tilde"))
        posts = [
            LocalPosterior(int(k), p, B, X, float(a), G, float(c))
            for k, B, X, a, G, c in zip(idx["k"], Bs, Xis, idx["alpha_tilde"], Gs, idx["condition_number"])
        ]
        return cls(
            ks=idx["k"].to_numpy(),
            T=int(meta["T"]),
            posteriors=posts,
            Phi=np.load(d / "Phi.npy"),
            intercept=np.load(d / "intercept.npy"),
            Sigma=np.load(d / "Sigma.npy"),
            stable=np.load(d / "stable.npy"),
            dates=dates,
            config=meta,
        )


def resolve_workers(workers: int | None) -> int:
    env = os.environ.get("NETRISK_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


def _estimate_points(y, prior, cfg: QBLLConfig, bandwidth: float, ks) -> list[tuple[LocalPosterior, DrawArrays]]:
    T = y.shape[0]
    out = []
    for k in ks:
        try:
            w = kernel_weights(int(k), T, bandwidth, cfg.weight_scale)
            post = local_posterior(y, int(k), prior, w, cfg.p)
            rng = substream(cfg.seed, "qbll", int(k))
            draws = _draw_arrays(post, cfg.n_draws, rng, cfg.reject_unstable)
        except (QBLLError, QBLLNumericalError) as exc:
            raise type(exc)(f"time point k={k}: {exc}") from exc
        out.append((post, draws))
    return out


def _chunks(seq, n):
    seq = list(seq)
    size = max(1, math.ceil(len(seq) / n))
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def estimate_path(panel, config: QBLLConfig | None = None, time_grid: Sequence[int] | None = None,
                  workers: int | None = 1, prior: PriorSpec | None = None) -> PosteriorField:
    """Posterior and draws at every ``k`` in ``time_grid`` (default ``p+1..T``).

    Each time point uses its own random substream derived from
    ``(config.seed, k)``, so results do not depend on ``workers``.
    """
    cfg = config or QBLLConfig()
    y = _values(panel)
    T, N = y.shape
    ks = np.arange(cfg.p + 1, T + 1) if time_grid is None else np.asarray(sorted(set(int(k) for k in time_grid)))
    if len(ks) == 0 or ks.min() < cfg.p + 1 or ks.max() > T:
        raise QBLLError(f"time_grid must lie in {cfg.p + 1}..{T}")
    bandwidth = cfg.bandwidth or default_bandwidth(T)
    if prior is None:
        prior = minnesota_prior(panel, cfg.p, cfg.shrinkage, cfg.own_lag_mean, intercept_scale=cfg.intercept_scale)
    n_workers = resolve_workers(workers)
    if n_workers == 1:
        results = _estimate_points(y, prior, cfg, bandwidth, ks)
    else:
        chunks = _chunks(ks, n_workers * 4)
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            parts = ex.map(_estimate_points, *zip(*[(y, prior, cfg, bandwidth, c) for c in chunks]))
            results = [r for part in parts for r in part]
    posts = [r[0] for r in results]
    draws = [r[1] for r in results]
    meta = cfg.to_dict()
    meta["bandwidth"] = bandwidth
    return PosteriorField(
        ks=ks,
        T=T,
        posteriors=posts,
        Phi=np.stack([d.Phi for d in draws]),
        intercept=np.stack([d.intercept for d in draws]),
        Sigma=np.stack([d.Sigma for d in draws]),
        stable=np.stack([d.stable for d in draws]),
        dates=getattr(panel, "dates", None),
        config=meta,
    )
