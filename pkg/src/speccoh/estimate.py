"""
Nonparametric spectral estimation on regular grids.

The matrix periodogram at Fourier frequency w is

    I_kl(w) = delta / ((2 pi)^d N) * S_k(w) * conj(S_l(w)),
    S_k(w) = sum_j Z_k(s_j) exp(-i s_j . w),

computed with one FFT per (replicate, variable). Matrices are stored with
shape ``(*grid.sizes, p, p)`` in Fourier-lattice order (ascending frequency
index along every axis).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import FrequencyGrid, MultiField, fourier_frequencies
from .models import PairSpectrum

__all__ = [
    "PeriodogramField",
    "SmoothingKernel",
    "CoherenceSummary",
    "UnsmoothedPeriodogramError",
    "ZeroVarianceError",
    "periodogram",
    "average_periodogram",
    "smooth",
    "coherence",
    "replicate_coherence",
    "lag_pairing",
    "standardize_anomalies",
    "nw_detrend",
]


class UnsmoothedPeriodogramError(ValueError):
    """Coherence requested from a raw periodogram (identically one by construction)."""


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PeriodogramField:
    freqs: FrequencyGrid
    mats: np.ndarray
    smoothed: bool = False
    rep: object = 0

    @property
    def nvars(self) -> int:
        return self.mats.shape[-1]

    def entry(self, k: int, l: int) -> np.ndarray:
        return self.mats[..., k, l]

    def pair(self, k: int, l: int) -> PairSpectrum:
        return PairSpectrum(self.mats[..., k, k].real, self.mats[..., l, l].real, self.mats[..., k, l])


def _dft(values: np.ndarray, freqs: FrequencyGrid) -> np.ndarray:
    """Lattice-ordered DFT over the trailing grid axes of ``values``."""
    d = freqs.grid.dims
    raw = np.fft.fftn(values, axes=tuple(range(values.ndim - d, values.ndim)))
    return freqs.to_lattice(raw)


def _norm_const(freqs: FrequencyGrid) -> float:
    g = freqs.grid
    return g.cell_volume / ((2 * np.pi) ** g.dims * g.npoints)


def periodogram(fld: MultiField, rep=0) -> PeriodogramField:
    """
    Raw matrix periodogram of one replicate, or ``rep="averaged"`` for the
    mean of the raw periodograms over all replicates.
    """
    freqs = fourier_frequencies(fld.grid)
    c = _norm_const(freqs)
    if rep == "averaged":
        S = _dft(fld.values, freqs)  # (R, p, *sizes)
        mats = c * np.einsum("rk...,rl...->...kl", S, np.conj(S)) / fld.reps
    else:
        S = _dft(fld.values[rep], freqs)  # (p, *sizes)
        mats = c * np.einsum("k...,l...->...kl", S, np.conj(S))
    return PeriodogramField(freqs, mats, smoothed=False, rep=rep)


@dataclass(frozen=True, eq=False)
class SmoothingKernel:
    """
    Nonnegative odd-sized stencil over the Fourier lattice summing to one.

    ``boundary`` is ``periodic`` (lattice wraps) or ``truncate`` (weights
    falling off the lattice are dropped and the rest renormalised).
    """

    weights: np.ndarray
    boundary: str = "periodic"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if any(n % 2 == 0 for n in w.shape):
            raise ValueError(f"stencil sizes must be odd, got {w.shape}")
        if np.any(w < 0):
            raise ValueError("stencil weights must be nonnegative")
        if abs(w.sum() - 1) > 1e-12:
            raise ValueError(f"stencil weights sum to {w.sum()!r}, not 1")
        if self.boundary not in ("periodic", "truncate"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def box(cls, d: int = 2, width: int = 3, boundary="periodic"):
        """Constant block of width^d cells, e.g. the 3 x 3 block of 1/9."""
        return cls(np.full((width,) * d, 1.0 / width**d), boundary)

    @classmethod
    def delta(cls, d: int = 2):
        return cls(np.ones((1,) * d))

    @classmethod
    def product(cls, *profiles, boundary="periodic"):
        """Tensor product of 1-d profiles, each normalised to sum one."""
        w = np.ones(())
        for prof in profiles:
            prof = np.asarray(prof, dtype=float)
            w = np.multiply.outer(w, prof / prof.sum())
        return cls(w / w.sum(), boundary)


def smooth(pg: PeriodogramField, kernel: SmoothingKernel) -> PeriodogramField:
    """Weighted average of neighbouring lattice matrices, entrywise."""
    d = pg.freqs.grid.dims
    w = kernel.weights
    if w.ndim != d:
        raise ValueError(f"stencil is {w.ndim}-d but the grid is {d}-d")
    if any(m > n for m, n in zip(w.shape, pg.freqs.shape)):
        raise ValueError(f"stencil {w.shape} larger than grid {pg.freqs.shape}")
    w = w.reshape(w.shape + (1, 1))
    mats = pg.mats
    if kernel.boundary == "periodic":
        def run(x):
            return ndimage.correlate(x, w, mode="wrap")
        out = run(mats.real) + 1j * run(mats.imag)
    else:
        def run(x):
            return ndimage.correlate(x, w, mode="constant", cval=0.0)
        mass = run(np.ones(mats.shape[:d] + (1, 1)))
        out = (run(mats.real) + 1j * run(mats.imag)) / mass
    return PeriodogramField(pg.freqs, out, smoothed=True, rep=pg.rep)


@dataclass(frozen=True, eq=False)
class CoherenceSummary:
    """
    Per-frequency squared coherence, absolute coherence, phase and gain of
    the pair (k, l), arrays shaped like the grid in lattice order.

    ``cross`` is the smoothed cross spectrum Ĩ_kl (averaged over replicate
    pairs) and ``zero_power`` marks frequencies where a diagonal entry
    vanished and coherence was set to 0.
    """

    freqs: FrequencyGrid
    coh2: np.ndarray
    phase: np.ndarray
    gain: np.ndarray
    pair: tuple
    nreps: int = 1
    cross: np.ndarray = None
    zero_power: np.ndarray = None

    @property
    def abs_coh(self) -> np.ndarray:
        return np.sqrt(self.coh2)

    def rows(self):
        w = self.freqs.freqs
        cols = [a.reshape(-1) for a in (self.coh2, self.abs_coh, self.phase, self.gain)]
        return np.column_stack([w] + cols)

    def to_csv(self, path) -> None:
        d = self.freqs.grid.dims
        header = [f"w{i + 1}" for i in range(d)] + ["coh2", "abs_coh", "phase", "gain"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in self.rows():
                wr.writerow([repr(float(v)) for v in row])


def _pair_stats(f11, f22, f12):
    den = f11 * f22
    zero = ~(den > 0)
    safe = np.where(zero, 1.0, den)
    coh2 = np.where(zero, 0.0, np.abs(f12) ** 2 / safe)
    A = np.where(f11 > 0, f12 / np.where(f11 > 0, f11, 1.0), 0.0)
    phase = np.angle(A)
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    return coh2, phase, np.abs(A), zero


def coherence(pg_s: PeriodogramField, k: int, l: int) -> CoherenceSummary:
    """Squared coherence |Ĩ_kl|^2 / (Ĩ_kk Ĩ_ll) plus phase and gain of l on k."""
    if not pg_s.smoothed:
        raise UnsmoothedPeriodogramError(
            "raw periodogram coherence is identically 1; smooth it first"
        )
    f11 = pg_s.mats[..., k, k].real
    f22 = pg_s.mats[..., l, l].real
    f12 = pg_s.mats[..., k, l]
    coh2, phase, gain, zero = _pair_stats(f11, f22, f12)
    return CoherenceSummary(pg_s.freqs, coh2, phase, gain, (k, l), 1, f12, zero)


def lag_pairing(reps: int, lag: int):
    """Pair replicate d of the first variable with replicate d - lag of the second."""
    if lag < 0:
        return [(d + lag, d) for d in range(-lag, reps)]
    return [(d, d - lag) for d in range(lag, reps)]


def average_periodogram(fld: MultiField, kernel: SmoothingKernel = None) -> PeriodogramField:
    """Replicate average of (optionally smoothed) periodograms."""
    if kernel is None:
        return periodogram(fld, "averaged")
    acc = None
    for r in range(fld.reps):
        m = smooth(periodogram(fld, r), kernel).mats
        acc = m if acc is None else acc + m
    return PeriodogramField(fourier_frequencies(fld.grid), acc / fld.reps, True, "averaged")


def replicate_coherence(
    fld: MultiField,
    k: int,
    l: int,
    kernel: SmoothingKernel = None,
    pairing=None,
    average: str = "coherence",
) -> CoherenceSummary:
    """
    Replicate-averaged coherence between variables k and l.

    Parameters
    ----------
    fld : MultiField
        Field with one or more replicates.
    kernel : SmoothingKernel, optional
        Defaults to the 3^d box.
    pairing : list of (int, int), optional
        Replicate of variable k paired with replicate of variable l; defaults
        to same-replicate pairs. See :func:`lag_pairing`.
    average : {"coherence", "spectra"}
        Average per-pair squared coherences (default) or average the smoothed
        spectra first and take one ratio.

    Phase and gain always come from the pair-averaged smoothed spectra.
    """
    if kernel is None:
        kernel = SmoothingKernel.box(fld.grid.dims)
    if pairing is None:
        pairing = [(r, r) for r in range(fld.reps)]
    pairing = list(pairing)
    if not pairing:
        raise ValueError("empty replicate pairing")
    if average not in ("coherence", "spectra"):
        raise ValueError(f"unknown averaging mode {average!r}")
    freqs = fourier_frequencies(fld.grid)
    c = _norm_const(freqs)
    # transform every replicate once; pairs reuse the lattice DFTs
    S = _dft(fld.values[:, [k, l]], freqs)
    coh_sum = np.zeros(freqs.shape)
    spec = np.zeros(freqs.shape + (2, 2), dtype=complex)
    for ra, rb in pairing:
        sa, sb = S[ra, 0], S[rb, 1]
        pair = np.stack([sa, sb])
        raw = c * np.einsum("k...,l...->...kl", pair, np.conj(pair))
        sm = smooth(PeriodogramField(freqs, raw), kernel).mats
        spec += sm
        coh_sum += _pair_stats(sm[..., 0, 0].real, sm[..., 1, 1].real, sm[..., 0, 1])[0]
    n = len(pairing)
    spec /= n
    coh2_spec, phase, gain, zero = _pair_stats(spec[..., 0, 0].real, spec[..., 1, 1].real, spec[..., 0, 1])
    coh2 = coh_sum / n if average == "coherence" else coh2_spec
    return CoherenceSummary(freqs, coh2, phase, gain, (k, l), n, spec[..., 0, 1], zero)


# ---------------------------------------------------------------------------
# anomaly preprocessing


def standardize_anomalies(fld: MultiField) -> MultiField:
    """Per cell and variable: subtract the replicate mean, divide by the sd (ddof=1)."""
    if fld.reps < 2:
        raise ValueError("standardising needs at least two replicates")
    x = fld.values
    dev = x - x.mean(axis=0)
    sd = np.sqrt(np.sum(np.abs(dev) ** 2, axis=0) / (fld.reps - 1))
    if np.any(sd == 0):
        bad = np.argwhere(sd == 0)[0]
        raise ZeroVarianceError(f"zero variance across replicates at (var, cell) {tuple(bad)}")
    return MultiField(fld.grid, dev / sd, real=fld.real)


def nw_detrend(x, bandwidth: float):
    """
    Subtract a Gaussian-kernel Nadaraya-Watson mean along the replicate axis.

    ``x`` is a MultiField or an array whose first axis indexes replicates
    (days). ``bandwidth`` is in replicate units; ``inf`` gives deviations
    from the global mean.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    vals = x.values if isinstance(x, MultiField) else np.asarray(x)
    R = vals.shape[0]
    if R < 2:
        raise ValueError("detrending needs at least two replicates")
    t = np.arange(R, dtype=float)
    if np.isinf(bandwidth):
        W = np.ones((R, R))
    else:
        W = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * bandwidth**2))
    W /= W.sum(axis=1, keepdims=True)
    trend = np.tensordot(W, vals, axes=(1, 0))
    out = vals - trend
    if isinstance(x, MultiField):
        return MultiField(x.grid, out, real=x.real)
    return out
