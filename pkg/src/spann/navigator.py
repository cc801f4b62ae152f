"""In-memory index over posting-list representatives.

Two strategies answer "nearest K representatives" queries: an exhaustive
scan, and a degree-bounded neighbor graph searched best-first.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CorruptionError, FormatError, InvalidArgumentError
from .vectors import ELEM_DTYPES, Metric, distances, pairwise

NAV_MAGIC = b"SPNNAVG\0"
NAV_VERSION = 1
_HEADER = struct.Struct("<8sIIQIIIII")  # magic ver strategy N dim degree elem metric n_entries
_ELEM_CODES = {"float32": 0, "uint8": 1}
_METRIC_CODES = {Metric.L2: 0, Metric.IP: 1}


class Strategy(enum.Enum):
    EXACT = "exact"
    GRAPH = "graph"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, Strategy):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown navigator strategy {value!r}") from None


@dataclass(frozen=True, eq=False)
class CentroidTable:
    """Representatives in list-id order: ``reps[i]`` stands for list ``list_ids[i]``."""

    reps: np.ndarray
    rep_ids: np.ndarray
    list_ids: np.ndarray

    def __post_init__(self):
        if self.reps.ndim != 2 or self.reps.shape[0] == 0:
            raise InvalidArgumentError("centroid table needs at least one representative")
        n = self.reps.shape[0]
        if len(self.rep_ids) != n or len(self.list_ids) != n:
            raise InvalidArgumentError("rep_ids/list_ids length must match reps")
        if not np.array_equal(np.sort(self.list_ids), np.arange(n)):
            raise InvalidArgumentError("list_ids must be a permutation of 0..N-1")

    @classmethod
    def from_assignment(cls, assignment, data: np.ndarray) -> "CentroidTable":
        rep_ids = np.asarray(assignment.rep_ids, dtype=np.int64)
        return cls(np.ascontiguousarray(data[rep_ids]), rep_ids,
                   np.arange(len(rep_ids), dtype=np.int64))

    @property
    def size(self) -> int:
        return self.reps.shape[0]

    @property
    def dim(self) -> int:
        return self.reps.shape[1]


@dataclass(eq=False)
class NavigatorIndex:
    strategy: Strategy
    metric: Metric
    degree: int = 0
    indptr: np.ndarray | None = None
    indices: np.ndarray | None = None
    entry_points: np.ndarray | None = None

    def neighbors(self, node: int) -> np.ndarray:
        if self.indptr is None:
            return np.empty(0, dtype=np.int64)
        return self.indices[self.indptr[node]:self.indptr[node + 1]]


def build_navigator(table: CentroidTable, strategy="exact", graph_degree: int = 16,
                    build_ef: int = 64, seed: int = 0, metric: Metric | str = Metric.L2,
                    num_entries: int = 8, chunk: int = 2048) -> NavigatorIndex:
    """Build the navigator over ``table``.

    The graph strategy takes the ``build_ef`` nearest representatives of every
    node (brute force), keeps at most ``graph_degree`` of them under the
    occlusion rule, adds reverse edges and re-prunes nodes that overflow.
    """
    strategy = Strategy.parse(strategy)
    metric = Metric.parse(metric)
    if graph_degree < 1:
        raise InvalidArgumentError("graph_degree must be >= 1")
    if strategy is Strategy.EXACT:
        return NavigatorIndex(strategy, metric)

    reps = table.reps
    N = reps.shape[0]
    rng = np.random.default_rng(seed)
    entries = np.sort(rng.choice(N, size=min(N, num_entries), replace=False)).astype(np.int64)
    if N == 1:
        return NavigatorIndex(strategy, metric, graph_degree, np.zeros(2, dtype=np.int64),
                              np.empty(0, dtype=np.int64), entries)
    is_l2 = metric is Metric.L2
    L = min(N - 1, max(build_ef, graph_degree))
    adj: list[np.ndarray] = []
    out = np.empty(graph_degree, dtype=np.int64)
    for s in range(0, N, chunk):
        block = reps[s:s + chunk]
        D = pairwise(block, reps, metric)
        rows = np.arange(block.shape[0])
        D[rows, s + rows] = np.inf
        cand = np.argpartition(D, L - 1, axis=1)[:, :L]
        for r in range(block.shape[0]):
            node = s + r
            c = cand[r]
            d = distances(reps[node], reps[c], metric)
            o = np.lexsort((c, d))
            n = _kernels.rng_prune_neighbors(node, c[o].astype(np.int64), d[o], reps,
                                             is_l2, graph_degree, out)
            adj.append(out[:n].copy())

    # reverse edges improve reachability; overfull nodes are pruned again
    incoming: list[list[int]] = [[] for _ in range(N)]
    for u, nbrs in enumerate(adj):
        for v in nbrs:
            incoming[v].append(u)
    for v in range(N):
        merged = np.unique(np.concatenate([adj[v], np.asarray(incoming[v], dtype=np.int64)]))
        merged = merged[merged != v]
        if len(merged) > graph_degree:
            d = distances(reps[v], reps[merged], metric)
            o = np.lexsort((merged, d))
            n = _kernels.rng_prune_neighbors(v, merged[o], d[o], reps, is_l2, graph_degree, out)
            merged = np.sort(out[:n])
        adj[v] = merged
    indptr = np.concatenate([[0], np.cumsum([len(a) for a in adj])]).astype(np.int64)
    indices = np.concatenate(adj).astype(np.int64) if indptr[-1] else np.empty(0, dtype=np.int64)
    return NavigatorIndex(strategy, metric, graph_degree, indptr, indices, entries)


def default_ef(K: int) -> int:
    return max(2 * K, 32)


def _topk(d: np.ndarray, ids: np.ndarray, K: int) -> np.ndarray:
    """Positions of the ``K`` smallest ``(d, id)`` pairs, in order."""
    if K < len(d):
        part = np.argpartition(d, K - 1)[:K]
        thr = d[part].max()
        pool = np.flatnonzero(d <= thr)
    else:
        pool = np.arange(len(d))
    order = np.lexsort((ids[pool], d[pool]))
    return pool[order[:K]]


def search_navigator(idx: NavigatorIndex, table: CentroidTable, q, K: int,
                     ef: int | None = None) -> list[tuple[int, float]]:
    """Up to ``K`` ``(list_id, distance)`` pairs ascending by distance, ties by list id."""
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    q = np.asarray(q)
    if q.ndim != 1 or q.shape[0] != table.dim:
        raise InvalidArgumentError(f"query dim {q.shape} does not match navigator dim {table.dim}")
    ids, d = search_arrays(idx, table, q, K, ef)
    return list(zip(ids.tolist(), d.tolist()))


def search_arrays(idx: NavigatorIndex, table: CentroidTable, q: np.ndarray, K: int,
                  ef: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`search_navigator`; returns list ids and distances."""
    K = min(K, table.size)
    if idx.strategy is Strategy.EXACT:
        d = distances(q, table.reps, idx.metric)
        pos = _topk(d, table.list_ids, K)
        return table.list_ids[pos], d[pos]
    ef = max(ef or default_ef(K), K)
    qq = q if q.dtype.kind == "f" else q.astype(np.float64)
    pos, d = _kernels.beam_search(qq, table.reps, idx.indptr, idx.indices,
                                  idx.entry_points, ef, idx.metric is Metric.L2)
    lids = table.list_ids[pos]
    order = np.lexsort((lids, d))[:K]
    return lids[order], d[order]


# --------------------------------------------------------------------------
# serialization


def save_navigator(path, idx: NavigatorIndex, table: CentroidTable) -> None:
    """Write header, representatives, ids and delta-encoded adjacency lists."""
    elem = _elem_name(table.reps.dtype)
    entries = idx.entry_points if idx.entry_points is not None else np.empty(0, dtype=np.int64)
    parts = [
        _HEADER.pack(NAV_MAGIC, NAV_VERSION, 0 if idx.strategy is Strategy.EXACT else 1,
                     table.size, table.dim, idx.degree, _ELEM_CODES[elem],
                     _METRIC_CODES[idx.metric], len(entries)),
        table.reps.astype(ELEM_DTYPES[elem]).tobytes(),
        table.rep_ids.astype("<i8").tobytes(),
        table.list_ids.astype("<i4").tobytes(),
        entries.astype("<i4").tobytes(),
    ]
    if idx.strategy is Strategy.GRAPH:
        counts = np.diff(idx.indptr).astype("<i4")
        deltas = np.empty(len(idx.indices), dtype="<i4")
        for v in range(table.size):
            a, b = idx.indptr[v], idx.indptr[v + 1]
            nb = np.sort(idx.indices[a:b])
            if b > a:
                deltas[a] = nb[0]
                deltas[a + 1:b] = np.diff(nb)
        parts += [counts.tobytes(), deltas.tobytes()]
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_navigator(path) -> tuple[NavigatorIndex, CentroidTable]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size + 4:
        raise FormatError(f"{path}: navigator file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, ver, strat, N, dim, degree, elem_code, metric_code, n_entries = _HEADER.unpack_from(body)
    if magic != NAV_MAGIC:
        raise FormatError(f"{path}: bad navigator magic {magic!r}")
    if ver != NAV_VERSION:
        raise FormatError(f"{path}: unsupported navigator version {ver}")
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: navigator checksum mismatch")
    elem = {v: k for k, v in _ELEM_CODES.items()}[elem_code]
    metric = {v: k for k, v in _METRIC_CODES.items()}[metric_code]
    off = _HEADER.size
    dt = ELEM_DTYPES[elem]

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    reps = take(dt, N * dim).reshape(N, dim).copy()
    rep_ids = take("<i8", N).astype(np.int64)
    list_ids = take("<i4", N).astype(np.int64)
    entries = take("<i4", n_entries).astype(np.int64)
    table = CentroidTable(reps, rep_ids, list_ids)
    strategy = Strategy.EXACT if strat == 0 else Strategy.GRAPH
    if strategy is Strategy.EXACT:
        return NavigatorIndex(strategy, metric, degree), table
    counts = take("<i4", N).astype(np.int64)
    deltas = take("<i4", int(counts.sum())).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.empty_like(deltas)
    for v in range(N):
        a, b = indptr[v], indptr[v + 1]
        indices[a:b] = np.cumsum(deltas[a:b])
    return NavigatorIndex(strategy, metric, degree, indptr, indices, entries), table


def _elem_name(dtype) -> str:
    return "uint8" if np.dtype(dtype) == np.uint8 else "float32"
