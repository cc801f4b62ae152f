"""Simulated multi-machine deployment.

Vectors are split into ``P`` balanced sub-partitions with closure replicas,
which are bin-packed onto ``M`` in-process machines using the access pattern
of training queries.  Dispatch routes a query to the machines owning its
nearest (pruned) sub-partitions, and every dispatched machine scans its own
vectors exhaustively.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .clustering import BalancedClusteringConfig, balanced_kmeans, closure_assign_batch
from .errors import CorruptionError, FormatError, InvalidArgumentError
from .evaluation import per_query_recall, GroundTruth
from .searcher import SearchParams, prune_count
from .vectors import Dataset, Metric, distances

PLAN_MAGIC = b"SPNPLAN\0"
PLAN_VERSION = 1
_PLAN_HEADER = struct.Struct("<8sIIIIII")  # magic ver P M dim metric all_dispatch


@dataclass(eq=False)
class PartitionPlan:
    P: int
    M: int
    sub_centroids: np.ndarray
    sub_members: list[np.ndarray]
    machine_of: np.ndarray
    predicted_access: np.ndarray
    metric: Metric = Metric.L2
    all_dispatch: bool = False  # random-partition baseline: no routing

    def __post_init__(self):
        if self.P < self.M or self.M < 1:
            raise InvalidArgumentError(f"need P >= M >= 1, got P={self.P}, M={self.M}")
        if len(self.machine_of) != self.P or len(self.sub_members) != self.P:
            raise InvalidArgumentError("machine_of/sub_members must cover every sub-partition")
        if np.any((self.machine_of < 0) | (self.machine_of >= self.M)):
            raise InvalidArgumentError("machine_of out of range")
        if len(np.unique(self.machine_of)) != self.M:
            raise InvalidArgumentError("every machine must host at least one sub-partition")

    def machine_members(self) -> list[np.ndarray]:
        out = []
        for m in range(self.M):
            parts = [self.sub_members[p] for p in np.flatnonzero(self.machine_of == m)]
            out.append(np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64))
        return out

    def machine_vectors(self) -> np.ndarray:
        return np.array([len(m) for m in self.machine_members()], dtype=np.int64)

    def machine_access(self) -> np.ndarray:
        return np.bincount(self.machine_of, weights=self.predicted_access, minlength=self.M)

    def inflation(self, n: int) -> float:
        """Stored vectors across machines relative to ``n`` originals."""
        return float(self.machine_vectors().sum()) / n


@dataclass
class DispatchReport:
    machine_vectors: np.ndarray
    machine_accesses: np.ndarray
    fanout: np.ndarray
    recall: float
    k: int
    per_query_recall: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def mean_fanout(self) -> float:
        return float(self.fanout.mean()) if self.fanout.size else 0.0

    @property
    def vector_imbalance(self) -> float:
        return float(self.machine_vectors.max() / self.machine_vectors.mean())

    @property
    def access_imbalance(self) -> float:
        m = self.machine_accesses.mean()
        return float(self.machine_accesses.max() / m) if m > 0 else 1.0

    def summary(self) -> str:
        return "\n".join([
            f"machines: {len(self.machine_vectors)}",
            f"recall@{self.k}: {self.recall:.4f}",
            f"mean fan-out: {self.mean_fanout:.3f}",
            f"vector max/mean: {self.vector_imbalance:.3f}",
            f"access max/mean: {self.access_imbalance:.3f}",
        ])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["machine", "vectors", "accesses"])
            for m, (v, a) in enumerate(zip(self.machine_vectors, self.machine_accesses)):
                w.writerow([m, int(v), int(a)])


# --------------------------------------------------------------------------
# packing


def naive_sequential_packing(num_items: int, M: int) -> np.ndarray:
    """Items in index order, cut into ``M`` consecutive runs of near-equal length."""
    return np.repeat(np.arange(M), [len(c) for c in np.array_split(np.arange(num_items), M)])


def _load_key(access, vectors, bins, M):
    a = np.bincount(bins, weights=access, minlength=M)
    v = np.bincount(bins, weights=vectors, minlength=M)
    return a, v


def best_fit_decreasing(access, vectors, M: int, slack: float = 0.05,
                        improve: bool = True) -> np.ndarray:
    """Pack items onto ``M`` bins; returns the bin of each item.

    Items go in decreasing (access, vectors) order into the fullest bin that
    stays within ``(1 + slack)`` of the mean load on both dimensions; items
    that fit nowhere go to the least loaded bin.  A move/swap pass then lowers
    the maximum access load, never raising the maximum vector load above its
    cap.  The result is never worse than the naive sequential packing.
    """
    access = np.asarray(access, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(access)
    if M < 1 or n < M:
        raise InvalidArgumentError(f"cannot pack {n} items onto {M} bins")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    use_access = access.sum() > 0
    cap_a = access.sum() / M * (1 + slack) if use_access else np.inf
    cap_v = vectors.sum() / M * (1 + slack)
    load_a = np.zeros(M)
    load_v = np.zeros(M)
    bins = np.full(n, -1, dtype=np.int64)
    for i in np.lexsort((np.arange(n), -vectors, -access)):
        fits = np.flatnonzero((load_a + access[i] <= cap_a) & (load_v + vectors[i] <= cap_v))
        if fits.size:
            # fullest feasible bin, primary access then vectors
            b = fits[np.lexsort((fits, -load_v[fits], -load_a[fits]))[0]]
        else:
            # least resulting overload across both dimensions
            over_v = (load_v + vectors[i]) / cap_v
            over_a = (load_a + access[i]) / cap_a if use_access else over_v
            b = int(np.lexsort((np.arange(M), over_v, np.maximum(over_a, over_v)))[0])
        bins[i] = b
        load_a[b] += access[i]
        load_v[b] += vectors[i]
    _fill_empty(bins, access, vectors, M)
    if improve:
        _improve(bins, access, vectors, M, cap_v)
    naive = naive_sequential_packing(n, M)
    if _objective(access, vectors, naive, M) < _objective(access, vectors, bins, M):
        return naive
    return bins


def _objective(access, vectors, bins, M):
    a, v = _load_key(access, vectors, bins, M)
    return (a.max(), v.max())


def _fill_empty(bins, access, vectors, M):
    counts = np.bincount(bins, minlength=M)
    for b in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        items = np.flatnonzero(bins == donor)
        small = items[np.lexsort((items, vectors[items], access[items]))[0]]
        bins[small] = b
        counts[donor] -= 1
        counts[b] += 1


def _improve(bins, access, vectors, M, cap_v, rounds: int = 200):
    """Greedy single-item moves and pairwise swaps off the most loaded bin."""
    for _ in range(rounds):
        a, v = _load_key(access, vectors, bins, M)
        best = (a.max(), v.max())
        vcap = max(cap_v, v.max())
        hot = int(np.argmax(a))
        found = None
        for i in np.flatnonzero(bins == hot):
            if np.count_nonzero(bins == hot) > 1:
                for b in range(M):
                    if b == hot:
                        continue
                    na, nv = a.copy(), v.copy()
                    na[hot] -= access[i]; nv[hot] -= vectors[i]
                    na[b] += access[i]; nv[b] += vectors[i]
                    cand = (na.max(), nv.max())
                    if nv[b] <= vcap and cand < best:
                        best, found = cand, ("move", i, b)
            for j in np.flatnonzero(bins != hot):
                b = bins[j]
                na, nv = a.copy(), v.copy()
                na[hot] += access[j] - access[i]; nv[hot] += vectors[j] - vectors[i]
                na[b] += access[i] - access[j]; nv[b] += vectors[i] - vectors[j]
                cand = (na.max(), nv.max())
                if max(nv[hot], nv[b]) <= vcap and cand < best:
                    best, found = cand, ("swap", i, j)
        if found is None:
            return
        if found[0] == "move":
            bins[found[1]] = found[2]
        else:
            i, j = found[1], found[2]
            bins[i], bins[j] = bins[j], bins[i]


# --------------------------------------------------------------------------
# plans


def route(sub_centroids: np.ndarray, q, params: SearchParams, metric: Metric) -> np.ndarray:
    """Sub-partitions a query is sent to: nearest ``max_k`` then slack pruning."""
    d = distances(q, sub_centroids, metric)
    K = min(params.max_k, len(d))
    order = np.lexsort((np.arange(len(d)), d))[:K]
    return order[:prune_count(d[order], params.epsilon2, metric)]


def sub_partition(X: Dataset, P: int, cfg: BalancedClusteringConfig):
    """Balanced ``P``-way clustering plus closure replicas.

    Each vector belongs to its balanced cluster and to every cluster the
    closure rule assigns it to.
    """
    centroids, labels = balanced_kmeans(X.data, P, cfg.lam, cfg.max_iters, cfg.seed)
    cents = centroids.astype(np.float32) if X.data.dtype.kind == "f" else centroids
    ptr, lists, _ = closure_assign_batch(X.data, np.ascontiguousarray(cents), cfg)
    owner = np.repeat(np.arange(X.count), np.diff(ptr))
    pairs = np.unique(np.concatenate([
        np.stack([labels.astype(np.int64), np.arange(X.count)], axis=1),
        np.stack([lists, owner], axis=1)]), axis=0)
    bounds = np.searchsorted(pairs[:, 0], np.arange(P + 1))
    members = [pairs[bounds[p]:bounds[p + 1], 1].copy() for p in range(P)]
    return centroids, members


def build_partition_plan(X: Dataset, train_q, P: int, M: int,
                         cfg: BalancedClusteringConfig | None = None,
                         params: SearchParams | None = None, subparts=None) -> PartitionPlan:
    """Cluster, replicate, predict access from ``train_q`` and pack onto ``M`` machines.

    ``subparts`` may pass a precomputed ``sub_partition`` result so several
    routing settings can share one clustering.
    """
    if P < M or M < 1:
        raise InvalidArgumentError(f"need P >= M >= 1, got P={P}, M={M}")
    cfg = cfg or BalancedClusteringConfig()
    params = params or SearchParams()
    centroids, members = subparts if subparts is not None else sub_partition(X, P, cfg)
    access = np.zeros(P, dtype=np.int64)
    Q = train_q.data if isinstance(train_q, Dataset) else np.asarray(train_q)
    for q in Q.reshape(-1, X.dim):
        access[route(centroids, q, params, cfg.metric)] += 1
    sizes = np.array([len(m) for m in members], dtype=np.int64)
    machine_of = best_fit_decreasing(access, sizes, M)
    return PartitionPlan(P, M, centroids, members, machine_of, access, cfg.metric)


def random_partition_baseline(X: Dataset, M: int, seed: int = 0,
                              metric: Metric | str = Metric.L2) -> PartitionPlan:
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    rng = np.random.default_rng(seed)
    owner = rng.integers(0, M, size=X.count)
    members = [np.flatnonzero(owner == m) for m in range(M)]
    cents = np.stack([X.data[m].mean(axis=0) if len(m) else np.zeros(X.dim) for m in members])
    return PartitionPlan(M, M, cents, members, np.arange(M), np.zeros(M, dtype=np.int64),
                         Metric.parse(metric), all_dispatch=True)


def simulate_dispatch(plan: PartitionPlan, X: Dataset, test_q, params: SearchParams,
                      gt: GroundTruth | None = None, max_machines: int | None = None,
                      seed: int = 0) -> DispatchReport:
    """Route every test query, search the dispatched machines, merge and score.

    Routed plans pick machines from the pruned sub-partitions.  All-dispatch
    plans send every query to all machines, or to ``max_machines`` of them
    chosen at random.  Recall is measured against ``gt`` or, when absent,
    against an exhaustive scan.
    """
    Q = test_q.data if isinstance(test_q, Dataset) else np.asarray(test_q)
    if len(Q) == 0:
        raise InvalidArgumentError("no test queries")
    machines = plan.machine_members()
    rng = np.random.default_rng(seed)
    k = params.k
    hits_ids, hits_d = [], []
    fanout = np.zeros(len(Q), dtype=np.int64)
    accesses = np.zeros(plan.M, dtype=np.int64)
    for qi, q in enumerate(Q):
        if plan.all_dispatch:
            sel = np.arange(plan.M)
            if max_machines is not None and max_machines < plan.M:
                sel = np.sort(rng.choice(plan.M, size=max_machines, replace=False))
        else:
            sel = np.unique(plan.machine_of[route(plan.sub_centroids, q, params, plan.metric)])
        fanout[qi] = len(sel)
        accesses[sel] += 1
        ids_parts, d_parts = [], []
        for m in sel:
            local = machines[m]
            d = distances(q, X.data[local], plan.metric)
            pos = _smallest_by_id(d, local, k)
            ids_parts.append(local[pos])
            d_parts.append(d[pos])
        ids = np.concatenate(ids_parts)
        dd = np.concatenate(d_parts)
        ids, first = np.unique(ids, return_index=True)
        dd = dd[first]
        order = np.lexsort((ids, dd))[:k]
        hits_ids.append(ids[order])
        hits_d.append(dd[order])
    if gt is None:
        from .evaluation import brute_force_topk
        gt = brute_force_topk(X, Q, k, plan.metric)
    pq = per_query_recall(hits_ids, gt, min(k, gt.depth), hits_d)
    return DispatchReport(plan.machine_vectors(), accesses, fanout, float(pq.mean()), k, pq)


def _smallest_by_id(d, ids, k):
    if k < len(d):
        part = np.argpartition(d, k - 1)[:k]
        pool = np.flatnonzero(d <= d[part].max())
    else:
        pool = np.arange(len(d))
    return pool[np.lexsort((ids[pool], d[pool]))][:k]


def split_queries(queries, seed: int | None = None):
    """Split into train/valid/test thirds; ``seed`` shuffles first."""
    ds = queries if isinstance(queries, Dataset) else Dataset.from_array(queries)
    idx = np.arange(ds.count)
    if seed is not None:
        idx = np.random.default_rng(seed).permutation(ds.count)
    return tuple(ds.subset(np.sort(part)) for part in np.array_split(idx, 3))


# --------------------------------------------------------------------------
# plan file


def save_plan(plan: PartitionPlan, path) -> None:
    sizes = np.array([len(m) for m in plan.sub_members], dtype="<i8")
    body = b"".join([
        _PLAN_HEADER.pack(PLAN_MAGIC, PLAN_VERSION, plan.P, plan.M, plan.sub_centroids.shape[1],
                          0 if plan.metric is Metric.L2 else 1, int(plan.all_dispatch)),
        plan.machine_of.astype("<i4").tobytes(),
        plan.predicted_access.astype("<i8").tobytes(),
        plan.sub_centroids.astype("<f8").tobytes(),
        sizes.tobytes(),
        np.concatenate(plan.sub_members).astype("<i8").tobytes() if plan.P else b"",
    ])
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_plan(path) -> PartitionPlan:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _PLAN_HEADER.size + 4:
        raise FormatError(f"{path}: plan file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, ver, P, M, dim, metric, all_dispatch = _PLAN_HEADER.unpack_from(body)
    if magic != PLAN_MAGIC or ver != PLAN_VERSION:
        raise FormatError(f"{path}: not a version {PLAN_VERSION} plan file")
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: plan checksum mismatch")
    off = _PLAN_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    machine_of = take("<i4", P).astype(np.int64)
    access = take("<i8", P)
    cents = take("<f8", P * dim).reshape(P, dim)
    sizes = take("<i8", P)
    flat = take("<i8", int(sizes.sum()))
    members = np.split(flat, np.cumsum(sizes)[:-1]) if P else []
    return PartitionPlan(P, M, cents, [m.copy() for m in members], machine_of, access,
                         Metric.L2 if metric == 0 else Metric.IP, bool(all_dispatch))
