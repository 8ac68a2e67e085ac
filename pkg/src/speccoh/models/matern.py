r"""
Matérn covariance and spectral density, and the multivariate Matérn model.

The spectral density convention is

    f(w) = (2 pi)^-d \int exp(-i w.h) C(h) dh,

under which the Matérn correlation M(h | nu, a) has density

    Gamma(nu + d/2) a^(2 nu) / (Gamma(nu) pi^(d/2) (a^2 + |w|^2)^(nu + d/2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, kve

__all__ = [
    "MaternParams",
    "CrossParams",
    "MultiMaternModel",
    "matern_correlation",
    "matern_cov",
    "matern_sdf",
    "matern_log_sdf",
    "mm_spectral_matrix",
    "mm_coherence",
    "mm_coherence_common_range",
    "mm_coherence_common_smoothness",
    "ValidityResult",
    "mm_validity_check",
    "InvalidModelError",
]

# arguments beyond this underflow exp(-x) in double precision
_MAX_ARG = 700.0


class InvalidModelError(ValueError):
    """Raised when a model fails its spectral validity check."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class MaternParams:
    sigma2: float = 1.0
    nu: float = 0.5
    a: float = 1.0

    def __post_init__(self):
        for name in ("sigma2", "nu", "a"):
            val = float(getattr(self, name))
            if not (val > 0 and np.isfinite(val)):
                raise ValueError(f"Matérn {name} must be positive and finite, got {val}")
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class CrossParams:
    rho: float
    nu: float
    a: float

    def __post_init__(self):
        rho, nu, a = float(self.rho), float(self.nu), float(self.a)
        if not -1 <= rho <= 1:
            raise ValueError(f"cross correlation rho must lie in [-1, 1], got {rho}")
        if not (nu > 0 and a > 0):
            raise ValueError("cross nu and a must be positive")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "a", a)


def _norm(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.abs(v)
    return np.sqrt(np.sum(v * v, axis=-1))


def matern_correlation(r, nu: float, a: float) -> np.ndarray:
    """
    Matérn correlation (2^(1-nu)/Gamma(nu)) (a r)^nu K_nu(a r) at distances ``r``.

    Equal to 1 at r = 0 and set to 0 once a r exceeds 700 (underflow).
    """
    x = a * np.abs(np.asarray(r, dtype=float))
    out = np.ones_like(x)
    pos = (x > 0) & (x <= _MAX_ARG)
    xp = x[pos]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logk = np.log(kve(nu, xp)) - xp
        vals = np.exp((1 - nu) * np.log(2) - gammaln(nu) + nu * np.log(xp) + logk)
    # kve overflows for x << nu; the correlation is 1 - O(x^2/nu) there
    vals = np.where(np.isfinite(vals), vals, 1.0)
    out[pos] = np.minimum(vals, 1.0)
    out[x > _MAX_ARG] = 0.0
    return out


def matern_cov(h, params: MaternParams) -> np.ndarray:
    """sigma^2 M(h | nu, a) for a lag vector ``h`` (or array of lags, last axis d)."""
    return params.sigma2 * matern_correlation(_norm(h), params.nu, params.a)


def matern_log_sdf(r, nu: float, a: float, d: int, sigma2: float = 1.0) -> np.ndarray:
    r2 = np.asarray(r, dtype=float) ** 2
    return (
        np.log(sigma2)
        + gammaln(nu + d / 2)
        - gammaln(nu)
        - 0.5 * d * np.log(np.pi)
        + 2 * nu * np.log(a)
        - (nu + d / 2) * np.log(a * a + r2)
    )


def matern_sdf(omega, params: MaternParams, d: int = None) -> np.ndarray:
    """
    Matérn spectral density at frequency vector(s) ``omega`` (last axis d).

    ``d`` defaults to the length of the last axis of ``omega``.
    """
    omega = np.asarray(omega, dtype=float)
    if d is None:
        d = 1 if omega.ndim == 0 else omega.shape[-1]
    return np.exp(matern_log_sdf(_norm(omega), params.nu, params.a, d, params.sigma2))


@dataclass(frozen=True)
class MultiMaternModel:
    """
    p-variate Matérn: C_ii = sigma_i^2 M(nu_i, a_i), C_ij = rho_ij sigma_i sigma_j M(nu_ij, a_ij).

    ``cross`` maps ordered pairs ``(i, j)`` with i < j to :class:`CrossParams`;
    missing pairs are uncorrelated.
    """

    dim: int
    marginals: tuple
    cross: dict = field(default_factory=dict)
    validated: bool = False

    def __post_init__(self):
        margs = tuple(m if isinstance(m, MaternParams) else MaternParams(**m) for m in self.marginals)
        p = len(margs)
        cross = {}
        for (i, j), c in dict(self.cross).items():
            i, j = int(i), int(j)
            if i == j or not (0 <= i < p and 0 <= j < p):
                raise ValueError(f"bad cross pair {(i, j)}")
            cross[(min(i, j), max(i, j))] = c if isinstance(c, CrossParams) else CrossParams(**c)
        if int(self.dim) < 1:
            raise ValueError("dim must be positive")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "marginals", margs)
        object.__setattr__(self, "cross", cross)

    @classmethod
    def bivariate(cls, dim, nu1, nu2, nu12, a1, a2, a12, rho, var1=1.0, var2=1.0):
        return cls(
            dim,
            (MaternParams(var1, nu1, a1), MaternParams(var2, nu2, a2)),
            {(0, 1): CrossParams(rho, nu12, a12)},
        )

    @property
    def nvars(self) -> int:
        return len(self.marginals)

    def pair(self, i: int, j: int):
        """(rho, nu, a) of entry (i, j); the diagonal gives (1, nu_i, a_i)."""
        if i == j:
            m = self.marginals[i]
            return 1.0, m.nu, m.a
        c = self.cross.get((min(i, j), max(i, j)))
        if c is None:
            return 0.0, 1.0, 1.0
        return c.rho, c.nu, c.a

    def validate(self, budget: int = 512) -> "MultiMaternModel":
        """Return a copy flagged ``validated``; raise InvalidModelError otherwise."""
        res = mm_validity_check(self, budget)
        if not res.valid:
            raise InvalidModelError(res.reason, res.witness)
        return replace(self, validated=True)

    def spectral_matrix(self, omega) -> np.ndarray:
        return mm_spectral_matrix(omega, self)

    def cov_matrix(self, h) -> np.ndarray:
        r = _norm(h)
        p = self.nvars
        sig = np.sqrt([m.sigma2 for m in self.marginals])
        out = np.zeros(r.shape + (p, p))
        for i in range(p):
            for j in range(i, p):
                rho, nu, a = self.pair(i, j)
                if rho == 0:
                    continue
                c = rho * sig[i] * sig[j] * matern_correlation(r, nu, a)
                out[..., i, j] = c
                out[..., j, i] = c
        return out


def mm_spectral_matrix(omega, model: MultiMaternModel) -> np.ndarray:
    """p x p spectral matrices at ``omega`` (shape (..., d)), returned as (..., p, p)."""
    omega = np.asarray(omega, dtype=float)
    r = _norm(omega) if omega.ndim else np.abs(omega)
    p = model.nvars
    sig = np.sqrt([m.sigma2 for m in model.marginals])
    out = np.zeros(np.shape(r) + (p, p))
    for i in range(p):
        for j in range(i, p):
            rho, nu, a = model.pair(i, j)
            if rho == 0:
                continue
            f = rho * sig[i] * sig[j] * np.exp(matern_log_sdf(r, nu, a, model.dim))
            out[..., i, j] = f
            out[..., j, i] = f
    return out


def _log_coh2_terms(model: MultiMaternModel, i: int, j: int):
    """Constant and radial pieces of log gamma^2 for the pair (i, j)."""
    d = model.dim
    rho, nu12, a12 = model.pair(i, j)
    mi, mj = model.marginals[i], model.marginals[j]
    const = (
        2 * gammaln(nu12 + d / 2)
        + gammaln(mi.nu)
        + gammaln(mj.nu)
        - gammaln(mi.nu + d / 2)
        - gammaln(mj.nu + d / 2)
        - 2 * gammaln(nu12)
        + 4 * nu12 * np.log(a12)
        - 2 * mi.nu * np.log(mi.a)
        - 2 * mj.nu * np.log(mj.a)
    )

    def radial(r2):
        return (
            (mi.nu + d / 2) * np.log(mi.a**2 + r2)
            + (mj.nu + d / 2) * np.log(mj.a**2 + r2)
            - (2 * nu12 + d) * np.log(a12**2 + r2)
        )

    return rho, const, radial


def mm_coherence(omega, model: MultiMaternModel, i: int = 0, j: int = 1) -> np.ndarray:
    """Squared coherence between variables i and j, closed form, at ``omega`` (..., d)."""
    omega = np.asarray(omega, dtype=float)
    r2 = np.sum(omega**2, axis=-1) if omega.ndim else omega**2
    if i == j:
        return np.ones(np.shape(r2))
    rho, const, radial = _log_coh2_terms(model, i, j)
    if rho == 0:
        return np.zeros(np.shape(r2))
    return np.exp(2 * np.log(abs(rho)) + const + radial(r2))


def mm_coherence_common_range(r, rho, nu1, nu2, nu12, a, d):
    """Squared coherence when a_1 = a_2 = a_12 = a; the radial factor is ((a^2 + r^2) / a^2)^(nu1+nu2-2nu12)."""
    g = (
        2 * gammaln(nu12 + d / 2)
        + gammaln(nu1)
        + gammaln(nu2)
        - gammaln(nu1 + d / 2)
        - gammaln(nu2 + d / 2)
        - 2 * gammaln(nu12)
    )
    r = np.asarray(r, dtype=float)
    return rho**2 * np.exp(g) * (1 + (r / a) ** 2) ** (nu1 + nu2 - 2 * nu12)


def mm_coherence_common_smoothness(r, rho, nu, a1, a2, a12, d):
    """Squared coherence when nu_1 = nu_2 = nu_12 = nu."""
    r2 = np.asarray(r, dtype=float) ** 2
    return (
        rho**2
        * (a12**2 / (a1 * a2)) ** (2 * nu)
        * ((a1**2 + r2) * (a2**2 + r2) / (a12**2 + r2) ** 2) ** (nu + d / 2)
    )


@dataclass(frozen=True)
class ValidityResult:
    valid: bool
    witness: np.ndarray = None
    reason: str = ""
    sup_coherence: float = None

    def __bool__(self):
        return self.valid


def _scan_radii(model: MultiMaternModel, budget: int) -> np.ndarray:
    scales = [m.a for m in model.marginals] + [c.a for c in model.cross.values()]
    lo, hi = 1e-4 * min(scales), 1e4 * max(scales)
    return np.concatenate([[0.0], np.logspace(np.log10(lo), np.log10(hi), budget)])


def _witness(r: float, d: int) -> np.ndarray:
    w = np.zeros(d)
    w[0] = r
    return w


def _pair_validity(model, i, j, radii, tol):
    rho, const, radial = _log_coh2_terms(model, i, j)
    if rho == 0:
        return None, 0.0
    logc = 2 * np.log(abs(rho)) + const
    logg = logc + radial(radii**2)
    k = int(np.argmax(logg))
    sup = float(np.exp(logg[k]))
    if logg[k] > np.log1p(tol):
        return (float(radii[k]), f"squared coherence {sup:.6g} > 1 between {i} and {j}"), sup
    mi, mj = model.marginals[i], model.marginals[j]
    expo = mi.nu + mj.nu - 2 * model.pair(i, j)[1]
    # behaviour as |w| -> infinity: gamma^2 ~ const * |w|^(2 expo)
    if expo > 0 or (expo == 0 and logc > np.log1p(tol)):
        r = radii[-1]
        while r < 1e150:
            r *= 2.0
            if logc + radial(r * r) > np.log1p(tol):
                break
        reason = (
            f"squared coherence between {i} and {j} unbounded as |w| grows "
            f"(nu_i + nu_j - 2 nu_ij = {expo:.6g})"
            if expo > 0
            else f"high-frequency squared coherence limit {np.exp(logc):.6g} exceeds 1"
        )
        return (float(r), reason), np.inf if expo > 0 else float(np.exp(logc))
    if expo == 0:
        sup = max(sup, float(np.exp(logc)))
    return None, sup


def mm_validity_check(model: MultiMaternModel, omega_budget: int = 512, tol: float = 1e-10):
    """
    Spectral validity check of a multivariate Matérn model.

    Every pair must have squared coherence at most 1 on a log-spaced radial
    scan plus the analytic limits at 0 and infinity. For p > 2 the smallest
    eigenvalue of the normalised spectral matrix is also scanned.
    """
    radii = _scan_radii(model, omega_budget)
    p = model.nvars
    sup = 0.0
    for i in range(p):
        for j in range(i + 1, p):
            fail, s = _pair_validity(model, i, j, radii, tol)
            sup = max(sup, s)
            if fail is not None:
                return ValidityResult(False, _witness(fail[0], model.dim), fail[1], s)
    if p > 2:
        wide = np.concatenate([radii, radii[-1] * np.logspace(1, 8, 64)])
        f = mm_spectral_matrix(wide[:, None] * np.eye(1, model.dim), model)
        dg = np.sqrt(np.einsum("...ii->...i", f))
        corr = f / (dg[..., :, None] * dg[..., None, :])
        lam = np.linalg.eigvalsh(corr)[:, 0]
        k = int(np.argmin(lam))
        if lam[k] < -tol:
            return ValidityResult(
                False,
                _witness(float(wide[k]), model.dim),
                f"spectral matrix has eigenvalue {lam[k]:.3g} relative to unit diagonal",
                sup,
            )
    return ValidityResult(True, None, "", sup)
