"""
Least-squares spectral fitting of Matérn parameters.

Marginals are fit by matching log Matérn spectral density to the log of an
averaged periodogram; cross parameters by matching the closed-form squared
coherence to an empirical squared coherence. Both use Nelder-Mead on
unconstrained parameters (log for sigma^2, nu, a; atanh for rho).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .estimate import CoherenceSummary, PeriodogramField
from .grid import FrequencyGrid
from .models import MaternParams, MultiMaternModel, mm_coherence, mm_validity_check
from .models.matern import matern_log_sdf

__all__ = [
    "FitConfig",
    "FitResult",
    "FitError",
    "band_mask",
    "fit_matern_marginal",
    "fit_matern_cross",
    "multistart",
    "format_table",
]


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """
    rmin, rmax
        Radial frequency band; ``rmin`` excludes 0 when left at 0 (strict
        inequality) and ``rmax=None`` keeps radii up to 90% of the largest.
    profile_variance
        Solve sigma^2 in closed form for each (nu, a) instead of searching it.
    """

    rmin: float = 0.0
    rmax: float = None
    maxiter: int = 2000
    tol: float = 1e-8
    restarts: int = 4
    profile_variance: bool = True
    start: dict = None


@dataclass
class FitResult:
    estimates: dict
    objective: float
    iterations: int
    converged: bool
    band: tuple
    nfreq: int
    flags: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def band_mask(radii: np.ndarray, cfg: FitConfig):
    rmax = cfg.rmax if cfg.rmax is not None else 0.9 * float(np.max(radii))
    mask = (radii > cfg.rmin) & (radii <= rmax)
    if cfg.rmin <= 0:
        mask &= radii > 0
    if not np.any(mask):
        raise FitError(f"frequency band ({cfg.rmin}, {rmax}] contains no frequencies")
    return mask, (float(cfg.rmin), float(rmax))


def _nelder_mead(obj, x0, cfg: FitConfig):
    """Nelder-Mead restarted from its own best point until the objective settles."""
    x = np.asarray(x0, dtype=float)
    best = obj(x)
    nit = 0
    converged = False
    for _ in range(1 + cfg.restarts):
        res = minimize(
            obj,
            x,
            method="Nelder-Mead",
            options={
                "maxiter": max(cfg.maxiter - nit, 1),
                "xatol": 1e-10,
                "fatol": cfg.tol * 1e-4,
                "adaptive": len(x) > 2,
            },
        )
        nit += res.nit
        improved = best - res.fun
        if res.fun <= best:
            x, best = res.x, res.fun
        converged = bool(res.success)
        if improved <= cfg.tol * 1e-4 * max(1.0, abs(best)) or nit >= cfg.maxiter:
            break
    return x, float(best), nit, converged and nit < cfg.maxiter


def _flat_directions(obj, x, names, rel=1e-8, step=1e-4):
    """Names loading on near-null eigenvectors of a finite-difference Hessian."""
    n = len(x)
    H = np.zeros((n, n))
    f0 = obj(x)
    E = np.eye(n) * step
    for i in range(n):
        for j in range(i, n):
            fpp = obj(x + E[i] + E[j])
            fpm = obj(x + E[i] - E[j])
            fmp = obj(x - E[i] + E[j])
            fmm = obj(x - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * step * step)
    if not np.all(np.isfinite(H)):
        return []
    lam, V = np.linalg.eigh(H)
    top = max(abs(lam).max(), 1e-300)
    flat = set()
    for k in range(n):
        if lam[k] <= rel * top:
            flat.update(names[i] for i in range(n) if abs(V[i, k]) > 0.3)
    return sorted(flat)


def _marginal_inputs(avg_pg, var):
    if isinstance(avg_pg, PeriodogramField):
        return avg_pg.freqs, avg_pg.mats[..., var, var].real
    freqs, values = avg_pg
    return freqs, np.asarray(values, dtype=float)


def fit_matern_marginal(avg_pg, cfg: FitConfig = None, var: int = 0) -> FitResult:
    """
    Fit (sigma^2, nu, a) by least squares on log spectra.

    ``avg_pg`` is an averaged (usually smoothed) PeriodogramField, whose
    diagonal entry ``var`` is used, or a ``(FrequencyGrid, values)`` pair.
    """
    cfg = cfg or FitConfig()
    freqs, values = _marginal_inputs(avg_pg, var)
    d = freqs.grid.dims
    mask, band = band_mask(freqs.radii, cfg)
    r = freqs.radii[mask]
    vals = values[mask]
    if np.any(~(vals > 0)):
        raise FitError("nonpositive periodogram value inside the fitting band")
    logI = np.log(vals)

    def resid(lnu, la):
        return logI - matern_log_sdf(r, math.exp(lnu), math.exp(la), d)

    if cfg.profile_variance:
        def obj(x):
            if np.any(np.abs(x) > 30):
                return np.inf
            u = resid(*x)
            return float(np.sum((u - u.mean()) ** 2))
    else:
        def obj(x):
            if np.any(np.abs(x) > 30):
                return np.inf
            return float(np.sum((resid(x[1], x[2]) - x[0]) ** 2))

    start = dict(cfg.start or {})
    if "nu" not in start:
        # tail slope of log I against log r is about -(2 nu + d)
        hi = r >= np.quantile(r, 0.5)
        slope = np.polyfit(np.log(r[hi]), logI[hi], 1)[0] if hi.sum() > 2 else -(2 + d)
        start["nu"] = float(np.clip((-slope - d) / 2, 0.1, 10))
    start.setdefault("a", float(np.quantile(r, 0.1)))
    x0 = [math.log(start["nu"]), math.log(start["a"])]
    if not cfg.profile_variance:
        x0 = [float(np.mean(resid(*x0)))] + x0
    x, best, nit, conv = _nelder_mead(obj, x0, cfg)
    if cfg.profile_variance:
        lnu, la = x
        ls2 = float(np.mean(resid(lnu, la)))
    else:
        ls2, lnu, la = x
    names = ["nu", "a"] if cfg.profile_variance else ["sigma2", "nu", "a"]
    flags = [] if conv else ["not_converged"]
    flat = _flat_directions(obj, np.asarray(x), names)
    if flat:
        flags.append("flat:" + ",".join(flat))
    est = {"sigma2": math.exp(ls2), "nu": math.exp(lnu), "a": math.exp(la)}
    return FitResult(est, best, nit, conv, band, int(mask.sum()), flags)


def _rho_sign(coh: CoherenceSummary) -> float:
    if coh.cross is None:
        return 1.0
    radii = coh.freqs.radii
    pos = radii[radii > 0]
    if pos.size == 0:
        return 1.0
    ring = np.isclose(radii, pos.min())
    re = float(np.mean(coh.cross.real[ring]))
    return -1.0 if re < 0 else 1.0


def fit_matern_cross(coh: CoherenceSummary, marginals, cfg: FitConfig = None) -> FitResult:
    """
    Fit (rho, nu12, a12) to an empirical squared coherence with the marginal
    Matérn parameters held fixed.

    The sign of rho is taken from the real part of the averaged smoothed
    cross spectrum on the lowest nonzero frequency ring.
    """
    cfg = cfg or FitConfig()
    m1, m2 = (m if isinstance(m, MaternParams) else MaternParams(**m) for m in marginals)
    d = coh.freqs.grid.dims
    mask, band = band_mask(coh.freqs.radii, cfg)
    om = coh.freqs.mesh[mask]
    target = np.asarray(coh.coh2)[mask]

    def model_of(x):
        rho = math.tanh(x[0])
        return MultiMaternModel.bivariate(d, m1.nu, m2.nu, math.exp(x[1]), m1.a, m2.a, math.exp(x[2]), rho)

    def obj(x):
        if abs(x[0]) > 20 or abs(x[1]) > 30 or abs(x[2]) > 30:
            return np.inf
        g = mm_coherence(om, model_of(x))
        return float(np.sum((g - target) ** 2))

    start = dict(cfg.start or {})
    start.setdefault("rho", float(np.sqrt(np.clip(np.mean(target), 1e-4, 0.98))))
    start.setdefault("nu", 0.5 * (m1.nu + m2.nu))
    start.setdefault("a", math.sqrt(m1.a * m2.a))
    x0 = [math.atanh(min(abs(start["rho"]), 0.999)), math.log(start["nu"]), math.log(start["a"])]
    x, best, nit, conv = _nelder_mead(obj, x0, cfg)
    rho = abs(math.tanh(x[0])) * _rho_sign(coh)
    est = {"rho": rho, "nu12": math.exp(x[1]), "a12": math.exp(x[2])}
    flags = [] if conv else ["not_converged"]
    flat = _flat_directions(obj, np.asarray(x), ["rho", "nu12", "a12"])
    if flat:
        flags.append("flat:" + ",".join(flat))
    model = MultiMaternModel.bivariate(d, m1.nu, m2.nu, est["nu12"], m1.a, m2.a, est["a12"], rho, m1.sigma2, m2.sigma2)
    if not mm_validity_check(model).valid:
        flags.append("invalid_model")
    return FitResult(est, best, nit, conv, band, int(mask.sum()), flags)


def multistart(fit_fn, data, cfg: FitConfig = None, n: int = 5, seed: int = 0, spread: float = 0.5, **kw):
    """
    Refit from ``n`` random starts around the default start (log-normal
    jitter of size ``spread``); returns the list of results.
    """
    cfg = cfg or FitConfig()
    base = fit_fn(data, cfg=cfg, **kw)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = {}
        for name, val in base.estimates.items():
            key = {"nu12": "nu", "a12": "a"}.get(name, name)
            if key == "sigma2":
                continue
            jit = math.exp(spread * rng.standard_normal())
            start[key] = abs(val) * jit if key != "rho" else min(abs(val) * jit, 0.95)
        out.append(fit_fn(data, cfg=FitConfig(**{**asdict(cfg), "start": start}), **kw))
    return out


def format_table(results: dict, params=("rho", "a12", "nu12")) -> str:
    """Horizon-by-parameter table of cross fits, one column per label."""
    labels = list(results)
    width = max(8, *(len(str(l)) + 2 for l in labels))
    lines = ["param".ljust(8) + "".join(str(l).rjust(width) for l in labels)]
    for p in params:
        row = p.ljust(8)
        for l in labels:
            row += f"{results[l].estimates[p]:.3f}".rjust(width)
        lines.append(row)
    return "\n".join(lines)
