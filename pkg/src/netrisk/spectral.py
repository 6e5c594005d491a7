"""VMA representation and frequency-band generalized variance decompositions.

All functions broadcast over leading batch axes (time points, draws), so a
``Psi`` array of shape ``(..., H + 1, N, N)`` and ``Sigma`` of shape
``(..., N, N)`` are processed in one call.

Frequency integrals use the grid ``omega_m = pi m / n_freq`` for
``m = 0..n_freq``.  Each point stands for itself and its mirror ``-omega_m``
(the spectrum of a real process is symmetric), which makes the grid the
``2 n_freq``-point rectangle rule on the full circle.  That rule is exact for
trigonometric polynomials of degree below ``2 n_freq``, so for ``H < 2 n_freq``
the full-band decomposition reproduces the time-domain one up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# VMA


class SpectralError(ValueError):
    pass


@dataclass
class VmaCoefficients:
    """Moving-average matrices ``Psi[..., h, :, :]`` for ``h = 0..H``."""

    Psi: np.ndarray
    u: float = float("nan")

    @property
    def H(self) -> int:
        return self.Psi.shape[-3] - 1

    @property
    def N(self) -> int:
        return self.Psi.shape[-1]


def _phi_of(draw) -> np.ndarray:
    Phi = getattr(draw, "Phi", draw)
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim == 2:
        Phi = Phi[None]
    return Phi


def var_to_vma(draw, H: int = 100) -> VmaCoefficients:
    """``Psi_0 = I``, ``Psi_h = sum_{l <= min(h, p)} Phi_l Psi_{h - l}``.

    ``draw`` is a ``CoefficientDraw`` or an array of lag matrices of shape
    ``(..., p, N, N)``.
    """
    if H < 1:
        raise SpectralError("H must be >= 1")
    Phi = _phi_of(draw)
    p, N = Phi.shape[-3], Phi.shape[-1]
    batch = Phi.shape[:-3]
    Psi = np.zeros(batch + (H + 1, N, N))
    Psi[..., 0, :, :] = np.eye(N)
    for h in range(1, H + 1):
        acc = Psi[..., h, :, :]
        for l in range(1, min(h, p) + 1):
            acc += Phi[..., l - 1, :, :] @ Psi[..., h - l, :, :]
    return VmaCoefficients(Psi, getattr(draw, "u", float("nan")))


def companion_matrix(Phi: np.ndarray) -> np.ndarray:
    Phi = _phi_of(Phi)
    p, N = Phi.shape[-3], Phi.shape[-1]
    C = np.zeros(Phi.shape[:-3] + (N * p, N * p))
    C[..., :N, :] = np.concatenate([Phi[..., l, :, :] for l in range(p)], axis=-1)
    if p > 1:
        C[..., N:, : N * (p - 1)] = np.eye(N * (p - 1))
    return C


def diagonalize_sigma(draw):
    """Zero the off-diagonal covariances; accepts a draw or a ``(..., N, N)`` array."""
    Sigma = np.asarray(getattr(draw, "Sigma", draw), dtype=float)
    d = np.diagonal(Sigma, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise SpectralError("covariance diagonal must be positive")
    out = d[..., :, None] * np.eye(Sigma.shape[-1])
    if hasattr(draw, "Sigma"):
        from dataclasses import replace

        return replace(draw, Sigma=out)
    return out


def _psi_of(vma) -> np.ndarray:
    return np.asarray(getattr(vma, "Psi", vma), dtype=float)


def _check_rows(den: np.ndarray) -> None:
    bad = np.nonzero(~(den > 0))
    if len(bad[0]):
        j = int(bad[-1][0])
        raise SpectralError(f"degenerate variance for row {j}")


def gfevd_time_domain(vma, Sigma) -> np.ndarray:
    """Generalized FEVD over ``h = 0..H``.

    ``theta[j, k] = sigma_kk^-1 sum_h ([Psi_h Sigma]_jk)^2 / sum_h [Psi_h Sigma Psi_h']_jj``.
    """
    Psi = _psi_of(vma)
    Sigma = np.asarray(Sigma, dtype=float)
    sig = np.diagonal(Sigma, axis1=-2, axis2=-1)
    if np.any(sig <= 0):
        raise SpectralError("covariance diagonal must be positive")
    S = Sigma[..., None, :, :]
    PS = Psi @ S
    num = (PS**2).sum(axis=-3) / sig[..., None, :]
    den = np.einsum("...hjk,...hjk->...j", PS, Psi)
    _check_rows(den)
    return num / den[..., :, None]


# ---------------------------------------------------------------------------
# bands


@dataclass(frozen=True)
class FrequencyBand:
    """Half-open band ``(a, b]`` in radians.

    A band with ``a >= 0`` denotes the symmetric set ``(a, b] U [-b, -a)``;
    when ``a == 0`` the zero frequency (infinite period) is included.  A band
    with ``a < 0`` is taken literally on the circle, e.g. ``(-pi, pi]``.
    """

    a: float
    b: float
    label: str = "custom"

    def __post_init__(self):
        if not (-math.pi <= self.a < self.b <= math.pi + 1e-15):
            raise SpectralError(f"invalid band ({self.a}, {self.b}]")

    @property
    def folded(self) -> bool:
        return self.a >= 0

    def measure(self) -> float:
        """Lebesgue measure of the set on the circle."""
        return 2 * (self.b - self.a) if self.folded else self.b - self.a

    def weights(self, n_freq: int) -> np.ndarray:
        """Quadrature weights on ``omega_m = pi m / n_freq``, ``m = 0..n_freq``."""
        omega = np.pi * np.arange(n_freq + 1) / n_freq
        step = np.pi / n_freq
        tol = 1e-12
        inside = (omega > self.a + tol) & (omega <= self.b + tol)
        if self.folded:
            mirror = inside & (omega > 0) & (np.arange(n_freq + 1) < n_freq)
            cnt = inside.astype(float) + mirror
            if self.a == 0:
                cnt[0] = 1.0
        else:
            neg = -omega
            mirror = (neg > self.a + tol) & (neg <= self.b + tol) & (omega > 0) & (np.arange(n_freq + 1) < n_freq)
            cnt = inside.astype(float) + mirror
        return cnt * step


def band_from_days(period_low_days: float, period_high_days: float, label: str = "custom") -> FrequencyBand:
    """Band of periods ``[low, high]`` days mapped through ``omega = 2 pi / P``.

    The upper frequency is capped at pi (the two-day Nyquist period), so a
    one-day lower period gives ``b = pi``.
    """
    if not (period_low_days >= 1 and period_high_days > period_low_days):
        raise SpectralError(f"invalid period bounds ({period_low_days}, {period_high_days})")
    a = 0.0 if math.isinf(period_high_days) else 2 * math.pi / period_high_days
    b = min(math.pi, 2 * math.pi / period_low_days)
    if a >= b:
        raise SpectralError("band is empty after capping at pi")
    return FrequencyBand(a, b, label)


def aggregate_band() -> FrequencyBand:
    return FrequencyBand(0.0, math.pi, "aggregate")


def default_bands(week_days: int = 5) -> list[FrequencyBand]:
    """Short (1 day to 1 week), long (beyond 1 week) and aggregate bands."""
    return [
        band_from_days(1, week_days, "short"),
        band_from_days(week_days, math.inf, "long"),
        aggregate_band(),
    ]


# ---------------------------------------------------------------------------
# frequency-domain decomposition


def transfer_function(vma, n_freq: int) -> np.ndarray:
    """``Psi(e^{-i omega_m}) = sum_h Psi_h e^{-i omega_m h}`` on the half grid.

    Evaluated with a real FFT of length ``2 n_freq``; lags beyond that length
    are wrapped, which is exact because ``e^{-i omega_m h}`` has period
    ``2 n_freq`` in ``h``.
    """
    M = 2 * n_freq
    return np.fft.rfft(_wrap_lags(_psi_of(vma), M), n=M, axis=-3)


def _wrap_lags(Psi: np.ndarray, M: int) -> np.ndarray:
    """Fold lags modulo ``M`` (exact for a length-``M`` DFT)."""
    Hp1 = Psi.shape[-3]
    if Hp1 <= M:
        return Psi
    widths = [(0, 0)] * Psi.ndim
    widths[-3] = (0, (-Hp1) % M)
    return np.pad(Psi, widths).reshape(Psi.shape[:-3] + (-1, M) + Psi.shape[-2:]).sum(axis=-4)


def band_weights(bands: Sequence[FrequencyBand], n_freq: int) -> np.ndarray:
    return np.stack([b.weights(n_freq) for b in bands])


def band_gfevd_many(vma, Sigma, bands: Sequence[FrequencyBand], n_freq: int = 512, chunk: int = 64) -> np.ndarray:
    """Unnormalized band decompositions, shape ``(..., len(bands), N, N)``.

    Numerator ``sigma_kk^-1 int_band |[Psi(e^{-iw}) Sigma]_jk|^2 dw``; the
    denominator integrates ``[Psi Sigma Psi^*]_jj`` over the whole circle on
    the same grid, which equals ``2 pi sum_h [Psi_h Sigma Psi_h']_jj``.
    """
    if n_freq < 64:
        raise SpectralError("n_freq must be >= 64")
    Psi = _psi_of(vma)
    Sigma = np.asarray(Sigma, dtype=float)
    batch = np.broadcast_shapes(Psi.shape[:-3], Sigma.shape[:-2])
    N = Psi.shape[-1]
    Psi = np.broadcast_to(Psi, batch + Psi.shape[-3:]).reshape((-1,) + Psi.shape[-3:])
    Sigma = np.broadcast_to(Sigma, batch + (N, N)).reshape(-1, N, N)
    sig = np.diagonal(Sigma, axis1=-2, axis2=-1)
    if np.any(sig <= 0):
        raise SpectralError("covariance diagonal must be positive")
    W = band_weights(bands, n_freq)
    full = aggregate_band().weights(n_freq)
    out = np.empty((Psi.shape[0], len(bands), N, N))
    M = 2 * n_freq
    for s in range(0, Psi.shape[0], chunk):
        P = _wrap_lags(Psi[s : s + chunk], M)
        PS = P @ Sigma[s : s + chunk, None]
        # the 2n-point circle rule integrates |.|^2 of these polynomials exactly (Parseval)
        den = 2 * np.pi * np.einsum("chjk,chjk->cj", PS, P, optimize=True)
        _check_rows(den)
        G = np.fft.rfft(np.ascontiguousarray(np.moveaxis(PS, -3, -1)), n=M, axis=-1)
        power = G.real**2 + G.imag**2
        num = np.moveaxis(power @ W.T, -1, 1) / sig[s : s + chunk, None, None, :]
        out[s : s + chunk] = num / den[:, None, :, None]
    return out.reshape(batch + (len(bands), N, N))


@dataclass
class AdjacencyTensor:
    """Band decomposition ``theta`` and its row-normalized version."""

    theta: np.ndarray
    band: FrequencyBand
    theta_tilde: np.ndarray | None = None
    u: float = float("nan")
    draw_id: int | None = None


def band_gfevd(vma, Sigma, band: FrequencyBand, n_freq: int = 512) -> AdjacencyTensor:
    theta = band_gfevd_many(vma, Sigma, [band], n_freq)[..., 0, :, :]
    return AdjacencyTensor(theta, band, u=getattr(vma, "u", float("nan")))


def normalize_adjacency(theta_band, theta_aggregate) -> np.ndarray:
    """Divide each row by the matching row sum of the aggregate decomposition."""
    tb = np.asarray(getattr(theta_band, "theta", theta_band), dtype=float)
    ta = np.asarray(getattr(theta_aggregate, "theta", theta_aggregate), dtype=float)
    if tb.shape[-2:] != ta.shape[-2:]:
        raise SpectralError("dimension mismatch")
    rs = ta.sum(axis=-1)
    if np.any(~(rs > 0)):
        raise SpectralError("zero aggregate row sum")
    return tb / rs[..., :, None]
