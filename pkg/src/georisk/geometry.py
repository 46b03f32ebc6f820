"""Spatial sample, regular grid and bandwidth-matrix types.

Everything here is immutable after construction and stored in double
precision; downstream bias-correction algebra is sensitive to cancellation,
so no single-precision fast path exists.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import DataError

DUPLICATE_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SpatialSample:
    """n observed values at n distinct planar locations.

    Parameters
    ----------
    locations : (n, d) array of coordinates, d = 2.
    values : (n,) array of responses Y(x_i).
    """

    locations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        locs = np.atleast_2d(np.asarray(self.locations, dtype=np.float64))
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if locs.ndim != 2:
            raise DataError("locations must be an (n, d) array")
        n, d = locs.shape
        if n < 1:
            raise DataError("at least one observation is required")
        if vals.shape[0] != n:
            raise DataError(
                f"got {n} locations but {vals.shape[0]} values"
            )
        if not np.all(np.isfinite(locs)):
            raise DataError("locations contain non-finite coordinates")
        if not np.all(np.isfinite(vals)):
            raise DataError("values contain non-finite entries")
        if n > 1:
            dmat = _pairwise(locs)
            off = dmat[np.triu_indices(n, k=1)]
            if off.min() <= DUPLICATE_TOL:
                i, j = np.unravel_index(
                    np.argmin(dmat + np.eye(n) * (dmat.max() + 1.0)), dmat.shape
                )
                raise DataError(
                    f"duplicate locations at indices {min(i, j)} and {max(i, j)} "
                    f"(separation <= {DUPLICATE_TOL:g})"
                )
        object.__setattr__(self, "locations", _readonly(locs))
        object.__setattr__(self, "values", _readonly(vals))

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def d(self) -> int:
        return self.locations.shape[1]


@dataclass(frozen=True, eq=False)
class RegularGrid:
    """Axis-aligned grid of node centers.

    Node (i, j) sits at ``origin + (i * spacing[0], j * spacing[1])``.
    Iteration over nodes is C-ordered (last index fastest) and deterministic.
    """

    origin: tuple
    spacing: tuple
    dims: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        spacing = tuple(float(v) for v in np.atleast_1d(self.spacing))
        dims = tuple(int(v) for v in np.atleast_1d(self.dims))
        if not (len(origin) == len(spacing) == len(dims)):
            raise DataError("origin, spacing and dims must share one length")
        if any(s <= 0 for s in spacing):
            raise DataError("grid spacing must be positive")
        if any(k < 1 for k in dims):
            raise DataError("grid dims must be >= 1")
        if not all(np.isfinite(origin)) or not all(np.isfinite(spacing)):
            raise DataError("grid origin/spacing must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)

    @property
    def n_nodes(self) -> int:
        out = 1
        for k in self.dims:
            out *= k
        return out

    def axis_coordinates(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def nodes(self) -> np.ndarray:
        """All node centers as an (n_nodes, d) array in iteration order."""
        axes = [self.axis_coordinates(k) for k in range(len(self.dims))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True, eq=False)
class BandwidthMatrix:
    """Symmetric positive-definite d x d smoothing matrix.

    The default construction path (`diagonal`) keeps the search space at one
    scale per axis; full symmetric matrices are accepted when supplied
    explicitly but are never searched over.
    """

    entries: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.entries, dtype=np.float64))
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise DataError("bandwidth matrix must be square")
        if not np.all(np.isfinite(h)):
            raise DataError("bandwidth matrix must be finite")
        if not np.allclose(h, h.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(h).max())):
            raise DataError("bandwidth matrix must be symmetric")
        eigvals = np.linalg.eigvalsh(0.5 * (h + h.T))
        if eigvals.min() <= 0.0:
            raise DataError("bandwidth matrix must be positive definite")
        object.__setattr__(self, "entries", _readonly(h))

    @classmethod
    def diagonal(cls, *scales: float) -> "BandwidthMatrix":
        return cls(np.diag(np.asarray(scales, dtype=np.float64)))

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def det(self) -> float:
        return float(np.linalg.det(self.entries))

    @cached_property
    def inverse(self) -> np.ndarray:
        return _readonly(np.linalg.inv(self.entries))

    @cached_property
    def is_diagonal(self) -> bool:
        off = self.entries - np.diag(np.diag(self.entries))
        return bool(np.all(off == 0.0))

    def diagonal_scales(self) -> np.ndarray:
        return np.diag(self.entries).copy()


def make_regular_grid(bounds, dims) -> RegularGrid:
    """Grid covering ``bounds`` with the first node at the lower corner and
    the last at the opposite corner.

    bounds : sequence of (min, max) pairs, one per axis.
    dims : node counts per axis (>= 1). A single-node axis sits at its min.
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    dims = tuple(int(k) for k in np.atleast_1d(dims))
    if len(bounds) != len(dims):
        raise DataError("bounds and dims must share one length")
    origin = []
    spacing = []
    for (lo, hi), k in zip(bounds, dims):
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise DataError(f"degenerate bounds ({lo}, {hi}); need min < max")
        if k < 1:
            raise DataError("dims must be >= 1")
        origin.append(lo)
        # a one-node axis keeps a positive (unused) step so the type invariant holds
        spacing.append((hi - lo) / (k - 1) if k > 1 else (hi - lo))
    return RegularGrid(tuple(origin), tuple(spacing), dims)


_DIST_CHUNK = 512


def _pairwise(locations: np.ndarray) -> np.ndarray:
    # distances from coordinate differences: the Gram-matrix shortcut loses
    # absolute accuracy ~eps * scale^2 near coincident points, which would
    # defeat the 1e-12 duplicate tolerance
    locs = np.asarray(locations, dtype=np.float64)
    n = locs.shape[0]
    d = np.empty((n, n))
    for start in range(0, n, _DIST_CHUNK):
        sl = slice(start, min(start + _DIST_CHUNK, n))
        diff = locs[sl, None, :] - locs[None, :, :]
        d[sl] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_distances(sample) -> np.ndarray:
    """Symmetric n x n matrix of Euclidean distances between sample sites.

    Accepts a SpatialSample or a raw (n, d) coordinate array.
    """
    locs = sample.locations if isinstance(sample, SpatialSample) else sample
    return _pairwise(locs)


def cross_distances(points_a, points_b) -> np.ndarray:
    """(m, n) matrix of distances between two point sets."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], _DIST_CHUNK):
        sl = slice(start, min(start + _DIST_CHUNK, a.shape[0]))
        diff = a[sl, None, :] - b[None, :, :]
        out[sl] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out
