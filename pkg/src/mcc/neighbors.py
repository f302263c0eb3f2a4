"""Uniform spatial hashing for exact nearest-neighbour and radius queries.

The kernels come from the compiled ``_neighbors_ext`` module when it is
available, otherwise from the numpy implementation in ``_neighbors_py``.
Set ``MCC_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from mcc import _neighbors_py

if os.environ.get("MCC_PURE_PYTHON"):
    _ext = None
else:
    try:
        from mcc import _neighbors_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"

# guards the floor() cell assignment against rounding at exactly radius == cell
_CELL_MARGIN = 1.0 + 1e-6


def _kernels(backend: str | None):
    backend = backend or BACKEND
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled neighbour kernels are not available")
        return _ext
    if backend == "numpy":
        return _neighbors_py
    raise ValueError(f"unknown backend {backend!r}")


class HashGrid:
    """Points bucketed into cubic cells of side ``cell``.

    Args:
        points: (N, 3) array, N >= 1.
        cell: cell side length; radius queries are exact for radius <= cell.
        backend: "cython", "numpy" or None for the import-time default.
    """

    def __init__(self, points, cell: float, backend: str | None = None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot build a grid over zero points")
        if not cell > 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        self.kernels = _kernels(backend)
        self.cell = float(cell)
        self.n = len(pts)
        self.origin = pts.min(axis=0)
        ijk = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        self.dims = ijk.max(axis=0) + 1
        if float(np.prod(self.dims.astype(np.float64))) > 2.0**62:
            raise ValueError("cell size too small for the extent of the points")
        key = (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]
        order = np.argsort(key, kind="stable")
        self.points = np.ascontiguousarray(pts[order])
        self.index = np.ascontiguousarray(order.astype(np.int64))
        self.keys, starts, counts = np.unique(key[order], return_index=True, return_counts=True)
        self.starts = starts.astype(np.int64)
        self.counts = counts.astype(np.int64)

    def _args(self, queries):
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        return (q, self.points, self.index, self.keys, self.starts, self.counts,
                self.origin, self.dims, self.cell)

    def nearest_within(self, queries, radius: float):
        """Distance and index of the nearest point for queries that have one within ``radius``.

        Queries with no point within ``radius`` get distance inf and index -1.
        Ties go to the lowest original index.
        """
        if radius > self.cell:
            raise ValueError(f"radius {radius} exceeds cell size {self.cell}")
        d, i = self.kernels.nearest_within(*self._args(queries))
        far = d > radius
        d[far] = np.inf
        i[far] = -1
        return d, i

    def nearest(self, queries):
        """Exact nearest distance and index for every query (no radius limit)."""
        return self.kernels.nearest(*self._args(queries))


def radius_grid(points, radius: float, backend: str | None = None) -> HashGrid:
    """Grid whose cells are just wider than ``radius`` (the 27-cell probe is then exact)."""
    return HashGrid(points, radius * _CELL_MARGIN, backend=backend)


def auto_grid(points, backend: str | None = None) -> HashGrid:
    """Grid sized for unbounded nearest-neighbour queries: about one point per cell."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    extent = np.ptp(pts, axis=0) if len(pts) else np.zeros(3)
    span = float(extent.max())
    if span <= 0.0:
        return HashGrid(pts, 1.0, backend=backend)
    occupied = np.maximum(extent, span * 1e-3)
    cell = (float(np.prod(occupied)) / len(pts)) ** (1.0 / 3.0)
    cell = max(cell, span / 256.0)
    return HashGrid(pts, cell, backend=backend)


def nearest(queries, points, backend: str | None = None):
    """Exact nearest-neighbour distances and indices from ``queries`` into ``points``."""
    return auto_grid(points, backend=backend).nearest(queries)


def brute_force_nearest(queries, points, chunk: int = 2048):
    """O(N*M) reference: nearest distance and lowest-index argmin for each query."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.empty(len(q))
    arg = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        blk = q[s:s + chunk]
        dx = blk[:, None, 0] - p[None, :, 0]
        dy = blk[:, None, 1] - p[None, :, 1]
        dz = blk[:, None, 2] - p[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        a = np.argmin(d2, axis=1)
        arg[s:s + chunk] = a
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(blk)), a])
    return dist, arg
