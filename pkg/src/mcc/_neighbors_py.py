"""Vectorised numpy versions of the hash-grid kernels.

Same signatures and bit-identical results as the compiled ``_neighbors_ext``;
used when the extension is not built or ``MCC_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import itertools

import numpy as np

_PROBE_27 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def _cells(queries, origin, cell):
    return np.floor((queries - origin) / cell).astype(np.int64)


def _scan(queries, pts, idx, keys, starts, counts, dims, qcell, offsets, best_d2, best_i, active):
    """Fold every point in ``qcell + offsets`` into the running best for ``active`` queries."""
    for off in offsets:
        nc = qcell[active] + off
        inside = np.all((nc >= 0) & (nc < dims), axis=1)
        q_rows = active[inside]
        if q_rows.size == 0:
            continue
        nc = nc[inside]
        key = (nc[:, 0] * dims[1] + nc[:, 1]) * dims[2] + nc[:, 2]
        slot = np.searchsorted(keys, key)
        slot_c = np.minimum(slot, len(keys) - 1)
        hit = keys[slot_c] == key
        q_rows, slot_c = q_rows[hit], slot_c[hit]
        if q_rows.size == 0:
            continue
        cnt = counts[slot_c]
        q_rep = np.repeat(q_rows, cnt)
        # positions start..start+cnt-1 for every hit cell, flattened
        within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        p_rows = np.repeat(starts[slot_c], cnt) + within
        dx = queries[q_rep, 0] - pts[p_rows, 0]
        dy = queries[q_rep, 1] - pts[p_rows, 1]
        dz = queries[q_rep, 2] - pts[p_rows, 2]
        d2 = dx * dx + dy * dy + dz * dz
        cand_i = idx[p_rows]
        # include the current best so ties against earlier cells resolve by index
        q_all = np.concatenate([q_rep, q_rows])
        d_all = np.concatenate([d2, best_d2[q_rows]])
        i_all = np.concatenate([cand_i, best_i[q_rows]])
        i_key = np.where(i_all < 0, np.iinfo(np.int64).max, i_all)
        order = np.lexsort((i_key, d_all, q_all))
        q_sorted = q_all[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = q_sorted[1:] != q_sorted[:-1]
        win = order[first]
        best_d2[q_all[win]] = d_all[win]
        best_i[q_all[win]] = i_all[win]


def nearest_within(queries, pts, idx, keys, starts, counts, origin, dims, cell):
    n = len(queries)
    best_d2 = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    if n:
        qcell = _cells(queries, origin, cell)
        _scan(queries, pts, idx, keys, starts, counts, dims, qcell, _PROBE_27,
              best_d2, best_i, np.arange(n))
    return np.sqrt(best_d2), best_i


def nearest(queries, pts, idx, keys, starts, counts, origin, dims, cell, chunk=1024):
    # exact O(N*M) scan in query chunks; points visited in original index order
    # so argmin already breaks ties by lowest index
    order = np.argsort(idx)
    p = pts[order]
    orig = idx[order]
    n = len(queries)
    best_d = np.empty(n)
    best_i = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        q = queries[s:s + chunk]
        dx = q[:, None, 0] - p[None, :, 0]
        dy = q[:, None, 1] - p[None, :, 1]
        dz = q[:, None, 2] - p[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        a = np.argmin(d2, axis=1)
        best_i[s:s + chunk] = orig[a]
        best_d[s:s + chunk] = np.sqrt(d2[np.arange(len(q)), a])
    return best_d, best_i
