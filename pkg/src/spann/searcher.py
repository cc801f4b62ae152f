"""Query pipeline: navigator, dynamic pruning, posting reads, exact re-rank."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    BalancedClusteringConfig,
    ClusterAssignment,
    build_partition,
    random_partition,
)
from .errors import InvalidArgumentError
from .navigator import (
    CentroidTable,
    NavigatorIndex,
    Strategy,
    build_navigator,
    load_navigator,
    search_arrays,
)
from .posting_store import (
    META_FILE,
    NAVIGATOR_FILE,
    POSTINGS_FILE,
    PostingReader,
    PostingReadStats,
    read_meta,
    write_postings,
)
from .vectors import Dataset, Metric, comparable, distances

# pruning slack per workload
EPSILON2_RECALL1 = 0.6
EPSILON2_RECALL10 = 7.0


@dataclass
class SearchParams:
    k: int = 10
    max_k: int = 64
    epsilon2: float = EPSILON2_RECALL10
    ef: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if self.max_k < 1:
            raise InvalidArgumentError("max_k must be >= 1")
        if not self.epsilon2 >= 0:
            raise InvalidArgumentError("epsilon2 must be >= 0")

    @classmethod
    def for_recall_at(cls, r: int, **kw) -> "SearchParams":
        eps = EPSILON2_RECALL1 if r == 1 else EPSILON2_RECALL10
        return cls(k=kw.pop("k", r), epsilon2=kw.pop("epsilon2", eps), **kw)


@dataclass
class SearchStats:
    io: PostingReadStats = field(default_factory=PostingReadStats)
    lists_considered: int = 0
    lists_pruned: int = 0
    candidates_scanned: int = 0

    @property
    def lists_probed(self) -> int:
        return self.io.lists_read


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    stats: SearchStats
    latency_ms: float = 0.0

    @property
    def hits(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.dists.tolist()))


def dynamic_prune(candidates, epsilon2: float, metric: Metric | str | None = None) -> list:
    """Keep candidate lists whose distance is within ``(1 + epsilon2)`` of the closest.

    ``candidates`` are ``(list_id, distance)`` pairs sorted ascending.  With a
    metric the distances are the stored ones (squared for L2); without one
    they are taken as already on the comparison scale.  The result is a
    prefix of the input.
    """
    if len(candidates) == 0:
        raise InvalidArgumentError("no candidates to prune")
    d = np.array([c[1] for c in candidates], dtype=np.float64)
    return list(candidates[: prune_count(d, epsilon2, metric)])


def prune_count(d: np.ndarray, epsilon2: float, metric: Metric | str | None = None) -> int:
    """Length of the surviving prefix of ascending distances ``d``."""
    if len(d) == 0 or math.isinf(epsilon2):
        return len(d)
    c = comparable(d, metric) if metric is not None else np.asarray(d, dtype=np.float64)
    limit = c[0] + epsilon2 * abs(c[0])
    return int(np.searchsorted(c, limit, side="right"))


def _topk(ids: np.ndarray, d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if len(d) > k:
        part = np.argpartition(d, k - 1)[:k]
        pool = np.flatnonzero(d <= d[part].max())
    else:
        pool = np.arange(len(d))
    order = pool[np.lexsort((ids[pool], d[pool]))][:k]
    return ids[order], d[order]


class SpannIndex:
    """A loaded index directory: navigator in memory, postings on disk."""

    def __init__(self, index_dir, direct_io: bool = False, warmup: bool = True):
        self.index_dir = os.fspath(index_dir)
        self.meta = read_meta(os.path.join(self.index_dir, META_FILE))
        self.navigator, self.table = load_navigator(os.path.join(self.index_dir, NAVIGATOR_FILE))
        self.reader = PostingReader(os.path.join(self.index_dir, POSTINGS_FILE), direct=direct_io)
        self.metric = self.navigator.metric
        if self.reader.num_lists != self.table.size:
            raise InvalidArgumentError("navigator and postings disagree on the list count")
        if warmup:
            # trigger kernel compilation so it does not land in measured latencies
            search(self, self.table.reps[0], SearchParams(k=1, max_k=1))

    @classmethod
    def open(cls, index_dir, **kw) -> "SpannIndex":
        return cls(index_dir, **kw)

    @property
    def dim(self) -> int:
        return self.reader.dim

    @property
    def num_lists(self) -> int:
        return self.table.size

    @property
    def num_vectors(self) -> int:
        return int(self.meta.get("count", 0))

    def memory_bytes(self) -> int:
        """Resident size of the in-memory structures (navigator + offsets table)."""
        total = self.table.reps.nbytes + self.table.rep_ids.nbytes + self.table.list_ids.nbytes
        total += self.reader.table.nbytes
        if self.navigator.indices is not None:
            total += self.navigator.indices.nbytes + self.navigator.indptr.nbytes
        return total

    def close(self) -> None:
        self.reader.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def search(self, q, params: SearchParams) -> SearchResult:
        return search(self, q, params)

    def all_lists(self) -> list[np.ndarray]:
        """Vector ids of every posting list (reads the whole file)."""
        return [self.reader.read(i)[0] for i in range(self.num_lists)]


def search(index: SpannIndex, q, params: SearchParams) -> SearchResult:
    start = time.perf_counter()
    q = np.asarray(q)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise InvalidArgumentError(f"query shape {q.shape} does not match index dim {index.dim}")
    lids, ld = search_arrays(index.navigator, index.table, q, params.max_k, params.ef)
    keep = prune_count(ld, params.epsilon2, index.metric)
    ids, vecs, io = index.reader.read_many(lids[:keep])
    stats = SearchStats(io=io, lists_considered=len(lids), lists_pruned=len(lids) - keep,
                        candidates_scanned=len(ids))
    if len(ids):
        d = distances(q, vecs, index.metric)
        # replicas carry identical vectors, so any instance has the same distance
        uniq, first = np.unique(ids, return_index=True)
        top_ids, top_d = _topk(uniq, d[first], params.k)
    else:
        top_ids, top_d = np.empty(0, dtype=np.int64), np.empty(0)
    return SearchResult(top_ids, top_d, stats, (time.perf_counter() - start) * 1000.0)


def batch_search(index: SpannIndex, queries, params: SearchParams, threads: int = 1) -> list[SearchResult]:
    """Search every row of ``queries``; results keep the input order."""
    Q = queries.data if isinstance(queries, Dataset) else np.asarray(queries)
    if threads <= 1:
        return [search(index, q, params) for q in Q]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: search(index, q, params), Q))


def min_probes_to_top1(index: SpannIndex, queries, top1_ids) -> np.ndarray:
    """Per query, the number of nearest lists to scan before the true nearest neighbor appears.

    Lists are ranked exhaustively by representative distance; ``0`` marks a
    vector found in no list.
    """
    Q = queries.data if isinstance(queries, Dataset) else np.asarray(queries)
    lists_of: dict[int, list[int]] = {}
    for lid, ids in enumerate(index.all_lists()):
        for v in ids.tolist():
            lists_of.setdefault(v, []).append(lid)
    out = np.zeros(len(Q), dtype=np.int64)
    for i, q in enumerate(Q):
        d = distances(q, index.table.reps, index.metric)
        order = index.table.list_ids[np.lexsort((index.table.list_ids, d))]
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        owners = lists_of.get(int(top1_ids[i]), [])
        if owners:
            out[i] = int(rank[owners].min()) + 1
    return out


# --------------------------------------------------------------------------
# building


def build_index(X: Dataset, index_dir, cfg: BalancedClusteringConfig | None = None,
                navigator: str | Strategy = "exact", graph_degree: int = 32,
                build_ef: int = 64, partition: str = "hbc", num_lists: int | None = None,
                page_size: int = 4096) -> ClusterAssignment:
    """Partition ``X`` and write a complete index directory.

    ``partition="random"`` draws ``num_lists`` random representatives instead
    of running the hierarchical clustering (ablation).
    """
    cfg = cfg or BalancedClusteringConfig()
    if partition == "hbc":
        assignment = build_partition(X, cfg)
    elif partition == "random":
        if num_lists is None:
            raise InvalidArgumentError("random partition needs num_lists")
        assignment = random_partition(X, num_lists, cfg)
    else:
        raise InvalidArgumentError(f"unknown partition method {partition!r}")
    table = CentroidTable.from_assignment(assignment, X.data)
    nav = build_navigator(table, navigator, graph_degree=graph_degree, build_ef=build_ef,
                          seed=cfg.seed, metric=cfg.metric)
    meta = {
        "partition": partition,
        "branch_k": cfg.k,
        "lambda": float(cfg.lam),
        "epsilon1": float(cfg.epsilon1),
        "max_replicas": cfg.max_replicas,
        "leaf_size": cfg.leaf_size or 0,
        "rng_filter": int(cfg.rng_filter),
        "rng_all_kept": int(cfg.rng_all_kept),
        "seed": cfg.seed,
        "graph_degree": graph_degree if nav.strategy is Strategy.GRAPH else 0,
        "mean_replicas": float(assignment.replicas.mean()),
        "dropped_replicas": assignment.dropped,
    }
    write_postings(assignment, X, index_dir, cfg.limit_bytes(X), navigator=nav, table=table,
                   meta=meta, page_size=page_size)
    return assignment
