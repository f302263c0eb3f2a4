# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hash-grid nearest-neighbour kernels.

Both entry points consume the arrays produced by ``mcc.neighbors.HashGrid``:
points sorted by cell key, their original indices, the sorted unique keys
and the start/count of each occupied cell.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, INFINITY

cnp.import_array()


cdef inline Py_ssize_t _find(const cnp.int64_t[::1] keys, cnp.int64_t key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == key:
        return lo
    return -1


cdef inline void _scan_cell(
    const double[:, ::1] pts, const cnp.int64_t[::1] idx,
    Py_ssize_t start, Py_ssize_t count,
    double qx, double qy, double qz,
    double* best_d2, cnp.int64_t* best_i,
) noexcept nogil:
    cdef Py_ssize_t m
    cdef double dx, dy, dz, d2
    for m in range(start, start + count):
        dx = qx - pts[m, 0]
        dy = qy - pts[m, 1]
        dz = qz - pts[m, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best_d2[0] or (d2 == best_d2[0] and idx[m] < best_i[0]):
            best_d2[0] = d2
            best_i[0] = idx[m]


def nearest_within(
    const double[:, ::1] queries,
    const double[:, ::1] pts,
    const cnp.int64_t[::1] idx,
    const cnp.int64_t[::1] keys,
    const cnp.int64_t[::1] starts,
    const cnp.int64_t[::1] counts,
    const double[::1] origin,
    const cnp.int64_t[::1] dims,
    double cell,
):
    """Nearest point among the 27 cells around each query.

    Returns (distance, index); distance is inf and index -1 when the probed
    cells are empty. Exact whenever the true nearest distance is <= cell.
    """
    cdef Py_ssize_t n = queries.shape[0], i, slot
    cdef int a, b, c
    cdef cnp.int64_t ci, cj, ck, ni, nj, nk, key, bi
    cdef double bd
    out_d = np.empty(n, dtype=np.float64)
    out_i = np.empty(n, dtype=np.int64)
    cdef double[::1] od = out_d
    cdef cnp.int64_t[::1] oi = out_i
    with nogil:
        for i in range(n):
            ci = <cnp.int64_t>floor((queries[i, 0] - origin[0]) / cell)
            cj = <cnp.int64_t>floor((queries[i, 1] - origin[1]) / cell)
            ck = <cnp.int64_t>floor((queries[i, 2] - origin[2]) / cell)
            bd = INFINITY
            bi = -1
            for a in range(-1, 2):
                ni = ci + a
                if ni < 0 or ni >= dims[0]:
                    continue
                for b in range(-1, 2):
                    nj = cj + b
                    if nj < 0 or nj >= dims[1]:
                        continue
                    for c in range(-1, 2):
                        nk = ck + c
                        if nk < 0 or nk >= dims[2]:
                            continue
                        key = (ni * dims[1] + nj) * dims[2] + nk
                        slot = _find(keys, key)
                        if slot >= 0:
                            _scan_cell(pts, idx, starts[slot], counts[slot],
                                       queries[i, 0], queries[i, 1], queries[i, 2], &bd, &bi)
            od[i] = sqrt(bd)
            oi[i] = bi
    return out_d, out_i


def nearest(
    const double[:, ::1] queries,
    const double[:, ::1] pts,
    const cnp.int64_t[::1] idx,
    const cnp.int64_t[::1] keys,
    const cnp.int64_t[::1] starts,
    const cnp.int64_t[::1] counts,
    const double[::1] origin,
    const cnp.int64_t[::1] dims,
    double cell,
):
    """Exact nearest point by growing Chebyshev rings of cells."""
    cdef Py_ssize_t n = queries.shape[0], i, slot
    cdef cnp.int64_t ci, cj, ck, ni, nj, nk, key, bi, k, kmax, lo0, hi0, lo1, hi1, lo2, hi2, t
    cdef double bd, reach
    out_d = np.empty(n, dtype=np.float64)
    out_i = np.empty(n, dtype=np.int64)
    cdef double[::1] od = out_d
    cdef cnp.int64_t[::1] oi = out_i
    with nogil:
        for i in range(n):
            ci = <cnp.int64_t>floor((queries[i, 0] - origin[0]) / cell)
            cj = <cnp.int64_t>floor((queries[i, 1] - origin[1]) / cell)
            ck = <cnp.int64_t>floor((queries[i, 2] - origin[2]) / cell)
            # ring index beyond which every occupied cell has been visited
            kmax = 0
            for t in range(3):
                if t == 0:
                    lo0 = ci
                    hi0 = dims[0] - 1 - ci
                elif t == 1:
                    lo0 = cj
                    hi0 = dims[1] - 1 - cj
                else:
                    lo0 = ck
                    hi0 = dims[2] - 1 - ck
                if lo0 > kmax:
                    kmax = lo0
                if hi0 > kmax:
                    kmax = hi0
            # rings closer than the grid box hold no cells
            k = 0
            if -ci > k:
                k = -ci
            if ci - (dims[0] - 1) > k:
                k = ci - (dims[0] - 1)
            if -cj > k:
                k = -cj
            if cj - (dims[1] - 1) > k:
                k = cj - (dims[1] - 1)
            if -ck > k:
                k = -ck
            if ck - (dims[2] - 1) > k:
                k = ck - (dims[2] - 1)
            bd = INFINITY
            bi = -1
            while k <= kmax:
                lo0 = ci - k if ci - k > 0 else 0
                hi0 = ci + k if ci + k < dims[0] - 1 else dims[0] - 1
                lo1 = cj - k if cj - k > 0 else 0
                hi1 = cj + k if cj + k < dims[1] - 1 else dims[1] - 1
                lo2 = ck - k if ck - k > 0 else 0
                hi2 = ck + k if ck + k < dims[2] - 1 else dims[2] - 1
                for ni in range(lo0, hi0 + 1):
                    for nj in range(lo1, hi1 + 1):
                        if ni - ci == k or ci - ni == k or nj - cj == k or cj - nj == k:
                            for nk in range(lo2, hi2 + 1):
                                key = (ni * dims[1] + nj) * dims[2] + nk
                                slot = _find(keys, key)
                                if slot >= 0:
                                    _scan_cell(pts, idx, starts[slot], counts[slot],
                                               queries[i, 0], queries[i, 1], queries[i, 2], &bd, &bi)
                        else:
                            # interior column: only the two z-faces of the ring are new
                            for t in range(2):
                                nk = ck - k if t == 0 else ck + k
                                if nk < 0 or nk >= dims[2] or (t == 1 and k == 0):
                                    continue
                                key = (ni * dims[1] + nj) * dims[2] + nk
                                slot = _find(keys, key)
                                if slot >= 0:
                                    _scan_cell(pts, idx, starts[slot], counts[slot],
                                               queries[i, 0], queries[i, 1], queries[i, 2], &bd, &bi)
                reach = k * cell
                if bd < reach * reach * (1.0 - 1e-9):
                    break
                k = k + 1
            od[i] = sqrt(bd)
            oi[i] = bi
    return out_d, out_i
