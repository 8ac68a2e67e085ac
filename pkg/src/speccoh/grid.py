"""
Regular sampling grids, multivariate field storage, Fourier frequency
lattices and the MFLD1 field file format.

Field values are held as complex128 arrays of shape ``(reps, nvars, *sizes)``
so that a single ``fftn`` over the trailing axes gives the discrete Fourier
transform of every (replicate, variable) slice at once.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "GridSpec",
    "MultiField",
    "FrequencyGrid",
    "fourier_indices",
    "fourier_frequencies",
    "read_field",
    "write_field",
    "read_field_csv",
    "FieldFileError",
    "MalformedHeaderError",
    "SizeMismatchError",
    "UnsupportedVersionError",
]

MAGIC = "MFLD1"


class FieldFileError(ValueError):
    """Base class for MFLD1 read failures."""


class MalformedHeaderError(FieldFileError):
    pass


class SizeMismatchError(FieldFileError):
    pass


class UnsupportedVersionError(FieldFileError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular d-dimensional grid with ``sizes[i]`` cells of width ``spacings[i]``."""

    sizes: tuple[int, ...]
    spacings: tuple[float, ...] = None

    def __post_init__(self):
        sizes = tuple(int(n) for n in np.atleast_1d(self.sizes))
        if self.spacings is None:
            spacings = (1.0,) * len(sizes)
        else:
            spacings = tuple(float(s) for s in np.atleast_1d(self.spacings))
        if len(sizes) == 0:
            raise ValueError("grid needs at least one axis")
        if len(spacings) != len(sizes):
            raise ValueError("sizes and spacings differ in length")
        if any(n < 1 for n in sizes):
            raise ValueError(f"grid sizes must be >= 1, got {sizes}")
        if any(not (s > 0 and np.isfinite(s)) for s in spacings):
            raise ValueError(f"grid spacings must be positive, got {spacings}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "spacings", spacings)

    @property
    def dims(self) -> int:
        return len(self.sizes)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def coordinates(self) -> np.ndarray:
        """Site coordinates, shape ``(*sizes, d)``, origin at index 0."""
        axes = [np.arange(n) * s for n, s in zip(self.sizes, self.spacings)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class MultiField:
    """
    A p-variate field on a grid, possibly with several replicates.

    Parameters
    ----------
    grid : GridSpec
    values : array_like
        Shape ``(reps, nvars, *grid.sizes)``. A 1-replicate field may be
        passed as ``(nvars, *sizes)``.
    real : bool, optional
        Flag the field as real valued; inferred from the data when None.
    """

    grid: GridSpec
    values: np.ndarray
    real: bool = None

    def __post_init__(self):
        vals = np.asarray(self.values)
        d = self.grid.dims
        if vals.ndim == d + 1:
            vals = vals[np.newaxis]
        if vals.ndim != d + 2 or vals.shape[2:] != self.grid.sizes:
            raise ValueError(
                f"values shape {vals.shape} does not match (reps, nvars, *{self.grid.sizes})"
            )
        if vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ValueError("need at least one replicate and one variable")
        vals = np.array(vals, dtype=np.complex128, copy=True)
        real = self.real
        if real is None:
            real = bool(np.all(vals.imag == 0))
        elif real and np.any(vals.imag != 0):
            raise ValueError("field flagged real has nonzero imaginary part")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "real", bool(real))

    @property
    def reps(self) -> int:
        return self.values.shape[0]

    @property
    def nvars(self) -> int:
        return self.values.shape[1]

    def select(self, pairs) -> "MultiField":
        """Build a one-replicate field whose variables are ``(var, rep)`` slices."""
        vals = np.stack([self.values[r, v] for v, r in pairs])
        return MultiField(self.grid, vals[np.newaxis], real=self.real)

    def __eq__(self, other):
        if not isinstance(other, MultiField):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.real == other.real
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def fourier_indices(n: int) -> np.ndarray:
    """Integer frequency indices -floor((n-1)/2), ..., floor(n/2) in ascending order."""
    lo = (n - 1) // 2
    return np.arange(-lo, n - lo)


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """
    Fourier frequencies of a grid in ascending index order along every axis.

    ``axes[i]`` holds the angular frequencies of axis i; ``raw_order[i]`` the
    DFT bin feeding each entry, so ``np.take(fft, raw_order[i], axis=i)``
    reorders a raw DFT into lattice order.
    """

    grid: GridSpec

    @cached_property
    def indices(self) -> tuple[np.ndarray, ...]:
        return tuple(fourier_indices(n) for n in self.grid.sizes)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            2 * np.pi * f / (s * n)
            for f, n, s in zip(self.indices, self.grid.sizes, self.grid.spacings)
        )

    @cached_property
    def raw_order(self) -> tuple[np.ndarray, ...]:
        return tuple(f % n for f, n in zip(self.indices, self.grid.sizes))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.sizes

    @cached_property
    def mesh(self) -> np.ndarray:
        """Frequency vectors, shape ``(*sizes, d)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def freqs(self) -> np.ndarray:
        """Frequency vectors flattened row-major, shape ``(N, d)``."""
        return self.mesh.reshape(-1, self.grid.dims)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.sqrt(np.sum(self.mesh**2, axis=-1))

    @property
    def cell(self) -> float:
        """Lattice cell volume (2 pi)^d / (delta N)."""
        return (2 * np.pi) ** self.grid.dims / (self.grid.cell_volume * self.grid.npoints)

    @cached_property
    def zero_index(self) -> tuple[int, ...]:
        return tuple(int(np.flatnonzero(f == 0)[0]) for f in self.indices)

    def to_lattice(self, raw: np.ndarray) -> np.ndarray:
        """Reorder the trailing d axes of a raw DFT array into lattice order."""
        d = self.grid.dims
        out = raw
        for i, order in enumerate(self.raw_order):
            out = np.take(out, order, axis=out.ndim - d + i)
        return out

    def to_raw(self, lattice: np.ndarray) -> np.ndarray:
        d = self.grid.dims
        out = lattice
        for i, order in enumerate(self.raw_order):
            out = np.take(out, np.argsort(order), axis=out.ndim - d + i)
        return out


def fourier_frequencies(grid: GridSpec) -> FrequencyGrid:
    return FrequencyGrid(grid)


# ---------------------------------------------------------------------------
# MFLD1 files


def write_field(fld: MultiField, path) -> None:
    header = {
        "magic": MAGIC,
        "dims": fld.grid.dims,
        "sizes": list(fld.grid.sizes),
        "spacings": list(fld.grid.spacings),
        "nvars": fld.nvars,
        "reps": fld.reps,
        "real": fld.real,
    }
    if fld.real:
        payload = np.ascontiguousarray(fld.values.real, dtype="<f8")
    else:
        payload = np.ascontiguousarray(fld.values, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload.tobytes())


def _parse_header(line: bytes) -> dict:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header is not a JSON object")
    magic = header.get("magic")
    if not isinstance(magic, str) or not magic.startswith("MFLD"):
        raise MalformedHeaderError(f"unknown magic {magic!r}")
    if magic != MAGIC:
        raise UnsupportedVersionError(f"unsupported field format version {magic!r}")
    required = ("dims", "sizes", "spacings", "nvars", "reps", "real")
    missing = [k for k in required if k not in header]
    if missing:
        raise MalformedHeaderError(f"header missing keys {missing}")
    if len(header["sizes"]) != header["dims"] or len(header["spacings"]) != header["dims"]:
        raise MalformedHeaderError("dims disagrees with sizes/spacings")
    return header


def read_field(path) -> MultiField:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("no header line")
    header = _parse_header(data[:nl])
    try:
        grid = GridSpec(tuple(header["sizes"]), tuple(header["spacings"]))
        nvars, reps = int(header["nvars"]), int(header["reps"])
    except (TypeError, ValueError) as exc:
        raise MalformedHeaderError(str(exc)) from None
    if nvars < 1 or reps < 1:
        raise MalformedHeaderError("nvars and reps must be positive")
    real = bool(header["real"])
    count = reps * nvars * grid.npoints
    width = 8 if real else 16
    body = data[nl + 1 :]
    if len(body) != count * width:
        raise SizeMismatchError(
            f"expected {count} values ({count * width} bytes), found {len(body)} bytes"
        )
    dtype = "<f8" if real else "<c16"
    vals = np.frombuffer(body, dtype=dtype).reshape((reps, nvars) + grid.sizes)
    return MultiField(grid, vals, real=real)


def read_field_csv(path, spacings=None) -> MultiField:
    """
    Import a field from CSV rows ``rep,var,i1,...,id,re[,im]``.

    The header row fixes the dimension; rows may come in any order but every
    (rep, var, site) cell must appear exactly once.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeaderError("empty CSV")
    head = [h.strip() for h in rows[0]]
    has_im = head[-1] == "im"
    d = len(head) - 3 - int(has_im)
    if d < 1 or head[:2] != ["rep", "var"]:
        raise MalformedHeaderError(f"bad CSV header {head}")
    body = rows[1:]
    if not body:
        raise SizeMismatchError("CSV has no data rows")
    try:
        table = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric cell: {exc}") from None
    if table.ndim != 2 or table.shape[1] != len(head):
        raise MalformedHeaderError("ragged CSV rows")
    idx = table[:, : 2 + d].astype(int)
    if np.any(idx < 0):
        raise MalformedHeaderError("negative index in CSV")
    shape = tuple(int(m) + 1 for m in idx.max(axis=0))
    vals = np.full(shape, np.nan + 0j)
    seen = np.zeros(shape, dtype=int)
    key = tuple(idx.T)
    np.add.at(seen, key, 1)
    vals[key] = table[:, 2 + d] + (1j * table[:, 3 + d] if has_im else 0)
    if np.any(seen != 1):
        raise SizeMismatchError("CSV does not cover every (rep, var, site) exactly once")
    grid = GridSpec(shape[2:], spacings)
    return MultiField(grid, vals, real=not has_im or None)
