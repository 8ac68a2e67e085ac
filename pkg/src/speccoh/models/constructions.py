"""
Pair spectra (coherence, phase, gain, optimal transfer) and the separable,
convolution and LMC constructions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matern import (
    MaternParams,
    MultiMaternModel,
    ValidityResult,
    matern_correlation,
    matern_sdf,
    mm_validity_check,
)

__all__ = [
    "PairSpectrum",
    "UndefinedSpectrumError",
    "pair_phase_gain",
    "optimal_transfer",
    "shifted_pair_spectra",
    "is_valid_spectral_matrix",
    "SeparableModel",
    "separable_coherence",
    "Kernel",
    "ConvolutionModel",
    "convolution_pair_spectra",
    "LmcModel",
    "lmc_spectral_matrix",
    "validity_check",
]


class UndefinedSpectrumError(ValueError):
    """A ratio of spectra was requested where the denominator vanishes."""


def _call(f, omega):
    return np.asarray(f(omega) if callable(f) else f)


@dataclass(frozen=True)
class PairSpectrum:
    """Spectral densities f11, f22 and cross density f12 of one pair, scalars or arrays."""

    f11: np.ndarray
    f22: np.ndarray
    f12: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f11", np.asarray(self.f11, dtype=float))
        object.__setattr__(self, "f22", np.asarray(self.f22, dtype=float))
        object.__setattr__(self, "f12", np.asarray(self.f12, dtype=complex))

    @classmethod
    def from_matrix(cls, f, i=0, j=1):
        f = np.asarray(f)
        return cls(f[..., i, i].real, f[..., j, j].real, f[..., i, j])

    def swapped(self) -> "PairSpectrum":
        return PairSpectrum(self.f22, self.f11, np.conj(self.f12))

    @property
    def coherency(self) -> np.ndarray:
        """Signed complex coherency f12/sqrt(f11 f22); 0 where either density vanishes."""
        den = np.sqrt(self.f11 * self.f22)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(den > 0, self.f12 / np.where(den > 0, den, 1.0), 0.0)
        return out

    @property
    def coherence2(self) -> np.ndarray:
        return np.abs(self.coherency) ** 2

    @property
    def conditional_spectrum(self) -> np.ndarray:
        """Spectral density |f12|^2 / f22 of the best linear predictor of Z1 from Z2."""
        if np.any(self.f22 == 0):
            raise UndefinedSpectrumError("f22 vanishes")
        return np.abs(self.f12) ** 2 / self.f22


def pair_phase_gain(ps: PairSpectrum):
    """
    Gain |A| and phase arg A of A = f12 / f11, the gain of Z2 on Z1.

    Returns
    -------
    gain, phase : ndarray
        Phase lies in (-pi, pi].
    """
    if np.any(ps.f11 == 0):
        raise UndefinedSpectrumError("gain undefined where f11 = 0")
    A = ps.f12 / ps.f11
    phase = np.angle(A)
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    return np.abs(A), phase


def optimal_transfer(ps: PairSpectrum) -> np.ndarray:
    """Frequency response f12/f22 of the MSE-optimal linear filter predicting Z1 from Z2."""
    if np.any(ps.f22 == 0):
        raise UndefinedSpectrumError("transfer undefined where f22 = 0")
    return ps.f12 / ps.f22


def shifted_pair_spectra(f2, omega, shift, alpha=1.0) -> PairSpectrum:
    """Spectra of Z1(s) = alpha Z2(s - shift), with Z2 having density ``f2``."""
    omega = np.asarray(omega, dtype=float)
    base = _call(f2, omega)
    rot = np.exp(-1j * (omega @ np.asarray(shift, dtype=float)))
    return PairSpectrum(alpha**2 * base, base, alpha * rot * base)


def is_valid_spectral_matrix(f, tol=1e-10) -> bool:
    """Hermitian with smallest eigenvalue >= -tol * trace, for every matrix in ``f``."""
    f = np.asarray(f)
    if not np.allclose(f, np.conj(np.swapaxes(f, -1, -2)), rtol=0, atol=tol * max(1.0, np.abs(f).max())):
        return False
    herm = 0.5 * (f + np.conj(np.swapaxes(f, -1, -2)))
    lam = np.linalg.eigvalsh(herm)
    tr = np.abs(np.trace(herm, axis1=-2, axis2=-1).real)
    return bool(np.all(lam[..., 0] >= -tol * tr))


# ---------------------------------------------------------------------------
# separable


def _check_pd(R):
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("R must be square")
    if not np.allclose(R, R.T):
        raise ValueError("R must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError("R is not positive definite") from None
    return R


def separable_coherence(R, i: int, j: int) -> float:
    """Frequency-constant squared coherence r_ij r_ji / (r_ii r_jj) of C(h) = R C0(h)."""
    R = _check_pd(R)
    return float(R[i, j] * R[j, i] / (R[i, i] * R[j, j]))


@dataclass(frozen=True)
class SeparableModel:
    """C(h) = R * M(h | nu, a) with a unit-variance Matérn base."""

    dim: int
    R: np.ndarray
    base: MaternParams = field(default_factory=MaternParams)

    def __post_init__(self):
        R = _check_pd(self.R).copy()
        R.setflags(write=False)
        object.__setattr__(self, "R", R)
        if not isinstance(self.base, MaternParams):
            object.__setattr__(self, "base", MaternParams(**self.base))

    @property
    def nvars(self):
        return self.R.shape[0]

    def spectral_matrix(self, omega):
        omega = np.asarray(omega, dtype=float)
        f = matern_sdf(omega, self.base, self.dim)
        return f[..., None, None] * self.R

    def cov_matrix(self, h):
        h = np.asarray(h, dtype=float)
        r = np.sqrt(np.sum(h * h, axis=-1))
        c = self.base.sigma2 * matern_correlation(r, self.base.nu, self.base.a)
        return c[..., None, None] * self.R


# ---------------------------------------------------------------------------
# convolution constructions


@dataclass(frozen=True)
class Kernel:
    """
    Real symmetric smoothing kernel described by its Fourier transform.

    kind
        ``identity`` (transfer = gain), ``gaussian`` (gain * exp(-width^2 |w|^2 / 2))
        or ``box`` (gain * prod sin(width w_i) / (width w_i); changes sign).
    """

    kind: str = "identity"
    width: float = 1.0
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian", "box"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.width > 0:
            raise ValueError("kernel width must be positive")

    def transfer(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.kind == "identity":
            return np.full(omega.shape[:-1], float(self.gain))
        if self.kind == "gaussian":
            return self.gain * np.exp(-0.5 * self.width**2 * np.sum(omega**2, axis=-1))
        return self.gain * np.prod(np.sinc(self.width * omega / np.pi), axis=-1)

    __call__ = transfer


@dataclass(frozen=True)
class ConvolutionModel:
    """
    Z_k = g_k * W for kernels g_k and a common stationary base W.

    The base is Matérn when ``base`` is given, otherwise white noise with
    constant spectral density ``white_level``. Two processes built from the
    same base with different kernels have cross density f_W g_i g_j.
    """

    dim: int
    kernels: tuple
    base: MaternParams = None
    white_level: float = 1.0

    def __post_init__(self):
        ks = tuple(k if isinstance(k, Kernel) else Kernel(**k) for k in self.kernels)
        object.__setattr__(self, "kernels", ks)
        if self.base is not None and not isinstance(self.base, MaternParams):
            object.__setattr__(self, "base", MaternParams(**self.base))

    @property
    def nvars(self):
        return len(self.kernels)

    def base_sdf(self, omega):
        omega = np.asarray(omega, dtype=float)
        if self.base is None:
            return np.full(omega.shape[:-1], float(self.white_level))
        return matern_sdf(omega, self.base, self.dim)

    def transfers(self, omega):
        return np.stack([k.transfer(omega) for k in self.kernels], axis=-1)

    def spectral_matrix(self, omega):
        g = self.transfers(omega)
        return self.base_sdf(omega)[..., None, None] * g[..., :, None] * g[..., None, :]

    def signed_coherency(self, omega, i=0, j=1):
        """Signed coherency; +-1 wherever both transfers are nonzero, 0 elsewhere."""
        g = self.transfers(omega)
        return np.sign(g[..., i]) * np.sign(g[..., j])


def convolution_pair_spectra(fK, f1, omega) -> PairSpectrum:
    """
    Spectra of (Z1, Z2) with Z2 = K * Z1 for a real symmetric kernel K.

    ``fK`` and ``f1`` are callables of ``omega`` (or precomputed values):
    f22 = f1 fK^2 and f12 = f1 fK.
    """
    g = _call(fK, omega).astype(float)
    base = _call(f1, omega).astype(float)
    return PairSpectrum(base, base * g * g, base * g)


# ---------------------------------------------------------------------------
# linear model of coregionalization


@dataclass(frozen=True)
class LmcModel:
    """Z = B W with independent latent processes W_k having densities ``latent[k]``.

    Latents are :class:`MaternParams` (enables covariance evaluation and
    simulation) or arbitrary callables of omega.
    """

    dim: int
    B: np.ndarray
    latent: tuple

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim != 2 or not np.all(np.isfinite(B)):
            raise ValueError("B must be a finite matrix")
        lat = tuple(
            MaternParams(**f) if isinstance(f, dict) else f for f in self.latent
        )
        if len(lat) != B.shape[1]:
            raise ValueError("need one latent density per column of B")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "latent", lat)

    @property
    def nvars(self):
        return self.B.shape[0]

    def latent_sdfs(self, omega):
        omega = np.asarray(omega, dtype=float)
        out = []
        for f in self.latent:
            v = matern_sdf(omega, f, self.dim) if isinstance(f, MaternParams) else _call(f, omega)
            if np.any(v < 0):
                raise ValueError("latent spectral density is negative")
            out.append(np.broadcast_to(v, omega.shape[:-1]))
        return np.stack(out, axis=-1)

    def spectral_matrix(self, omega):
        return lmc_spectral_matrix(omega, self)

    def cov_matrix(self, h):
        if not all(isinstance(f, MaternParams) for f in self.latent):
            raise TypeError("covariances need Matérn latents")
        h = np.asarray(h, dtype=float)
        r = np.sqrt(np.sum(h * h, axis=-1))
        c = np.stack([f.sigma2 * matern_correlation(r, f.nu, f.a) for f in self.latent], axis=-1)
        return np.einsum("ik,...k,jk->...ij", self.B, c, self.B)


def lmc_spectral_matrix(omega, m: LmcModel) -> np.ndarray:
    """B diag(f_1(w), ..., f_p(w)) B^T at every frequency."""
    f = m.latent_sdfs(omega)
    return np.einsum("ik,...k,jk->...ij", m.B, f, m.B)


def validity_check(model, budget: int = 512) -> ValidityResult:
    """
    Spectral validity of any model.

    Multivariate Matérn models use the closed-form coherence scan; other
    models are scanned for negative eigenvalues over log-spaced radii along
    the first axis (all implemented families are isotropic or, for box
    kernels, checked there as a representative direction).
    """
    if isinstance(model, MultiMaternModel):
        return mm_validity_check(model, budget)
    radii = np.concatenate([[0.0], np.logspace(-4, 4, budget)])
    om = radii[:, None] * np.eye(1, model.dim)
    f = model.spectral_matrix(om)
    tr = np.trace(f, axis1=-2, axis2=-1).real
    lam = np.linalg.eigvalsh(0.5 * (f + np.conj(np.swapaxes(f, -1, -2))))[:, 0]
    bad = lam < -1e-10 * tr
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        return ValidityResult(False, om[k], f"spectral matrix eigenvalue {lam[k]:.3g} < 0")
    return ValidityResult(True)
