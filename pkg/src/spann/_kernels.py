"""Numba kernels for the sequential inner loops of index construction."""

import numba
import numpy as np


@numba.njit(cache=True)
def penalized_assign(D, order, penalty_unit, labels, sizes):
    """Greedy size-penalized assignment in a fixed scan order.

    Vector ``order[t]`` goes to ``argmin_i D[x, i] + penalty_unit * sizes[i]``
    where ``sizes`` counts the vectors placed so far.  Ties go to the lower
    cluster id.  ``sizes`` must be zeroed by the caller.
    """
    k = D.shape[1]
    for t in range(order.shape[0]):
        x = order[t]
        best = 0
        best_cost = D[x, 0] + penalty_unit * sizes[0]
        for i in range(1, k):
            c = D[x, i] + penalty_unit * sizes[i]
            if c < best_cost:
                best_cost = c
                best = i
        labels[x] = best
        sizes[best] += 1


@numba.njit(cache=True, inline="always")
def _dist(a, b, is_l2):
    acc = 0.0
    if is_l2:
        for j in range(a.shape[0]):
            d = np.float64(a[j]) - np.float64(b[j])
            acc += d * d
        return acc
    for j in range(a.shape[0]):
        acc += np.float64(a[j]) * np.float64(b[j])
    return -acc


@numba.njit(cache=True)
def rng_select(cand, cand_d, valid, reps, is_l2, all_kept, out, out_n):
    """Relative-neighborhood filter over per-row candidate lists.

    ``cand[r]`` holds cluster ids sorted by ascending distance ``cand_d[r]``;
    only the first ``valid[r]`` entries are considered.  The first entry is
    always kept.  A later entry ``j`` survives when ``d(x, c_j) <= d(c_p, c_j)``
    for every kept ``p`` (``all_kept``) or for the last kept one only.
    ``out`` receives the surviving positions within each row.
    """
    for r in range(cand.shape[0]):
        n = 0
        for t in range(valid[r]):
            j = cand[r, t]
            keep = True
            if n > 0:
                if all_kept:
                    for s in range(n):
                        if cand_d[r, t] > _dist(reps[cand[r, out[r, s]]], reps[j], is_l2):
                            keep = False
                            break
                else:
                    if cand_d[r, t] > _dist(reps[cand[r, out[r, n - 1]]], reps[j], is_l2):
                        keep = False
            if keep:
                out[r, n] = t
                n += 1
        out_n[r] = n


@numba.njit(cache=True, nogil=True)
def exact_rows(block, reps, cand, is_l2, out):
    """``out[r, t] = dist(block[r], reps[cand[r, t]])``."""
    for r in range(cand.shape[0]):
        for t in range(cand.shape[1]):
            out[r, t] = _dist(block[r], reps[cand[r, t]], is_l2)


@numba.njit(cache=True)
def rng_prune_neighbors(node, cand, cand_d, reps, is_l2, degree, out):
    """Occlusion pruning of one node's candidate neighbors (graph build).

    ``cand`` is sorted by ascending distance ``cand_d`` from ``node``.  Returns
    the number of neighbors written to ``out``.
    """
    n = 0
    for t in range(cand.shape[0]):
        if n >= degree:
            break
        j = cand[t]
        if j == node or j < 0:
            continue
        dup = False
        for s in range(n):
            if out[s] == j:
                dup = True
                break
        if dup:
            continue
        keep = True
        for s in range(n):
            if _dist(reps[out[s]], reps[j], is_l2) < cand_d[t]:
                keep = False
                break
        if keep:
            out[n] = j
            n += 1
    return n


@numba.njit(cache=True, nogil=True)
def _pool_insert(pool_id, pool_d, pool_x, ef, size, nid, d):
    # sorted insertion by (d, id); the tail beyond ef falls off
    pos = size
    while pos > 0 and (pool_d[pos - 1] > d or (pool_d[pos - 1] == d and pool_id[pos - 1] > nid)):
        pos -= 1
    if pos >= ef:
        return size
    last = size if size < ef else ef - 1
    for s in range(last, pos, -1):
        pool_id[s] = pool_id[s - 1]
        pool_d[s] = pool_d[s - 1]
        pool_x[s] = pool_x[s - 1]
    pool_id[pos] = nid
    pool_d[pos] = d
    pool_x[pos] = False
    return min(size + 1, ef)


@numba.njit(cache=True, nogil=True)
def beam_search(q, reps, indptr, indices, entries, ef, is_l2):
    """Best-first search with a bounded pool of ``ef`` nodes.

    Returns pool ids and distances sorted ascending (ties by id).
    """
    N = reps.shape[0]
    visited = np.zeros(N, dtype=np.bool_)
    pool_id = np.empty(ef + 1, dtype=np.int64)
    pool_d = np.empty(ef + 1, dtype=np.float64)
    pool_x = np.zeros(ef + 1, dtype=np.bool_)
    size = 0

    for e in entries:
        if not visited[e]:
            visited[e] = True
            size = _pool_insert(pool_id, pool_d, pool_x, ef, size, e, _dist(q, reps[e], is_l2))

    while True:
        cur = -1
        for s in range(size):
            if not pool_x[s]:
                cur = s
                break
        if cur < 0:
            break
        pool_x[cur] = True
        node = pool_id[cur]
        for p in range(indptr[node], indptr[node + 1]):
            nb = indices[p]
            if visited[nb]:
                continue
            visited[nb] = True
            d = _dist(q, reps[nb], is_l2)
            if size < ef or d < pool_d[size - 1] or (d == pool_d[size - 1] and nb < pool_id[size - 1]):
                size = _pool_insert(pool_id, pool_d, pool_x, ef, size, nb, d)
    return pool_id[:size].copy(), pool_d[:size].copy()
