"""Posting-list partitioning.

Hierarchical size-penalized k-means splits the data until every leaf fits the
posting size limit.  Each leaf is represented by its member closest to the
leaf mean, and every vector is then assigned to all leaves whose
representative is nearly as close as its nearest one, thinned by the
relative-neighborhood rule so replicas point in different directions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError
from .vectors import Dataset, Metric, distances, pairwise, pairwise_sq_l2, within_slack

log = logging.getLogger(__name__)

# posting limits for 128-d data: 12KB for byte vectors, 48KB for float vectors
DEFAULT_POSTING_LIMIT = {"uint8": 12 * 1024, "float32": 48 * 1024}
REFERENCE_DIM = 128


def entry_bytes(dim: int, itemsize: int) -> int:
    """On-disk size of one posting entry: int32 id + raw vector."""
    return 4 + dim * itemsize


def default_posting_limit(elem_type: str) -> int:
    return DEFAULT_POSTING_LIMIT[elem_type]


def scaled_posting_limit(dim: int, elem_type: str) -> int:
    """Default limit rescaled so a ``dim``-d list holds as many entries as a 128-d one."""
    base = DEFAULT_POSTING_LIMIT[elem_type]
    itemsize = 1 if elem_type == "uint8" else 4
    return base * entry_bytes(dim, itemsize) // entry_bytes(REFERENCE_DIM, itemsize)


# balanced splits leave leaves about 80% full on average
LEAF_FILL = 0.8


def leaf_size_for_fraction(fraction: float) -> int:
    """Leaf capacity that yields roughly ``fraction * n`` posting lists."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("centroid fraction must be in (0, 1]")
    return max(1, int(round(1.0 / (LEAF_FILL * fraction))))


@dataclass
class BalancedClusteringConfig:
    k: int = 8
    lam: float = 1.0
    max_iters: int = 16
    posting_limit_bytes: int | None = None
    max_replicas: int = 8
    epsilon1: float = 10.0
    seed: int = 0
    # optional cap on leaf entries below the byte limit (sets the list count)
    leaf_size: int | None = None
    metric: Metric = Metric.L2
    rng_filter: bool = True
    rng_all_kept: bool = True
    max_depth: int = 64
    # nearest representatives shortlisted per vector before exact re-ranking
    shortlist: int = 32

    def __post_init__(self):
        self.metric = Metric.parse(self.metric)
        if self.k < 2:
            raise InvalidArgumentError("branching factor k must be >= 2")
        if self.lam < 0:
            raise InvalidArgumentError("lambda must be >= 0")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if self.max_replicas < 1:
            raise InvalidArgumentError("max_replicas must be >= 1")
        if self.epsilon1 < 0:
            raise InvalidArgumentError("epsilon1 must be >= 0")
        if self.leaf_size is not None and self.leaf_size < 1:
            raise InvalidArgumentError("leaf_size must be >= 1")

    def limit_bytes(self, ds: Dataset) -> int:
        if self.posting_limit_bytes is not None:
            return self.posting_limit_bytes
        return default_posting_limit(ds.elem_type)

    def list_capacity(self, ds: Dataset) -> int:
        """Max entries a posting list may hold for this dataset."""
        cap = self.limit_bytes(ds) // entry_bytes(ds.dim, ds.itemsize)
        if cap < 1:
            raise InvalidArgumentError(
                f"posting limit {self.limit_bytes(ds)} bytes cannot hold one entry "
                f"of {entry_bytes(ds.dim, ds.itemsize)} bytes"
            )
        return cap

    def leaf_capacity(self, ds: Dataset) -> int:
        cap = self.list_capacity(ds)
        return min(cap, self.leaf_size) if self.leaf_size else cap


@dataclass
class ClusterAssignment:
    """Multi-membership partition of a dataset into posting lists.

    ``vec_ptr``/``vec_lists`` store, CSR style, the list ids of every vector
    ordered by ascending distance to the list representative; the first one
    is the vector's closest list.
    """

    centroids: np.ndarray
    rep_ids: np.ndarray
    vec_ptr: np.ndarray
    vec_lists: np.ndarray
    leaf_sizes: np.ndarray
    dropped: int = 0
    info: dict = field(default_factory=dict)

    @property
    def num_lists(self) -> int:
        return len(self.rep_ids)

    @property
    def num_vectors(self) -> int:
        return len(self.vec_ptr) - 1

    def clusters_of(self, i: int) -> np.ndarray:
        return self.vec_lists[self.vec_ptr[i]:self.vec_ptr[i + 1]]

    @property
    def assignment(self) -> list[list[int]]:
        return [self.clusters_of(i).tolist() for i in range(self.num_vectors)]

    @property
    def replicas(self) -> np.ndarray:
        return np.diff(self.vec_ptr)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.vec_lists, minlength=self.num_lists)

    def members(self) -> list[np.ndarray]:
        """Vector ids of every list, ascending."""
        owner = np.repeat(np.arange(self.num_vectors), self.replicas)
        order = np.lexsort((owner, self.vec_lists))
        bounds = np.searchsorted(self.vec_lists[order], np.arange(self.num_lists + 1))
        ids = owner[order]
        return [ids[bounds[i]:bounds[i + 1]] for i in range(self.num_lists)]


# --------------------------------------------------------------------------
# balanced k-means


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d = pairwise_sq_l2(X, X[chosen[0]][None, :])[:, 0].astype(np.float64)
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with a chosen seed
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0]) if rest.size else chosen[-1]
        else:
            nxt = int(rng.choice(n, p=d / total))
        chosen.append(nxt)
        d = np.minimum(d, pairwise_sq_l2(X, X[nxt][None, :])[:, 0])
    return X[chosen].astype(np.float64)


def _repair_empty(X, D, labels, centroids, k):
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0 or counts.max() <= 1:
            return labels
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[int(np.argmax(D[members, big]))]
        e = int(empty[0])
        centroids[e] = X[far]
        labels[far] = e
    return labels


def balanced_kmeans(X, k: int, lam: float = 1.0, max_iters: int = 16, seed=0,
                    init: np.ndarray | None = None):
    """Size-penalized k-means.

    Each pass assigns vectors in a fixed (seeded) order to the cluster
    minimizing ``squared distance + lam * scale * size / (n / k)`` where
    ``scale`` is the mean squared distance of vectors to their nearest centroid
    and ``size`` counts the vectors already placed in this pass, then moves
    centroids to cluster means.  ``lam=0`` is plain Lloyd iteration.

    Returns ``(centroids, labels)``; every cluster is non-empty.
    """
    X = np.asarray(X.data if isinstance(X, Dataset) else X)
    n = X.shape[0]
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if n < k:
        raise InvalidArgumentError(f"cannot split {n} vectors into {k} clusters")
    Xf = X.astype(np.float32, copy=False)
    if k == 1:
        return Xf.astype(np.float64).mean(axis=0, keepdims=True), np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(Xf, k, rng) if init is None else np.array(init, dtype=np.float64)
    order = rng.permutation(n)
    labels = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    fair = n / k
    for _ in range(max_iters):
        D = pairwise_sq_l2(Xf, centroids).astype(np.float64)
        unit = 0.0
        if lam > 0:
            unit = lam * float(D.min(axis=1).mean()) / fair
        new = np.empty(n, dtype=np.int64)
        sizes[:] = 0
        _kernels.penalized_assign(D, order, unit, new, sizes)
        new = _repair_empty(Xf, D, new, centroids, k)
        stable = np.array_equal(new, labels)
        labels = new
        centroids = _means(Xf, labels, k, centroids)
        if stable:
            break
    return centroids, labels


def _means(X, labels, k, fallback):
    counts = np.bincount(labels, minlength=k)
    nz = counts > 0
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[nz]
    order = np.argsort(labels, kind="stable")
    sums = np.add.reduceat(X[order].astype(np.float64), starts, axis=0)
    out = fallback.copy()
    out[nz] = sums / counts[nz, None]
    return out


# --------------------------------------------------------------------------
# hierarchical clustering


def hierarchical_balanced_cluster(X: Dataset, cfg: BalancedClusteringConfig) -> ClusterAssignment:
    """Recursively split until every leaf fits the posting capacity.

    A node with ``s`` members and capacity ``cap`` is split into
    ``min(k, ceil(s / cap))`` children.  Leaves are numbered in depth-first
    order with children visited by cluster id.
    """
    if X.count == 0:
        raise InvalidArgumentError("cannot cluster an empty dataset")
    cap = cfg.leaf_capacity(X)
    data = X.data
    leaves: list[np.ndarray] = []
    centroids: list[np.ndarray] = []
    node_counter = 0
    stack: list[tuple[np.ndarray, int]] = [(np.arange(X.count), 0)]
    while stack:
        idx, depth = stack.pop()
        if len(idx) <= cap:
            leaves.append(idx)
            centroids.append(data[idx].astype(np.float64).mean(axis=0))
            continue
        if depth >= cfg.max_depth:
            raise InvalidArgumentError(
                f"recursion depth {cfg.max_depth} reached with {len(idx)} vectors left"
            )
        k = min(cfg.k, math.ceil(len(idx) / cap))
        _, labels = balanced_kmeans(
            data[idx], k, cfg.lam, cfg.max_iters, seed=[cfg.seed, node_counter]
        )
        node_counter += 1
        children = [idx[labels == c] for c in range(k)]
        if max(len(c) for c in children) == len(idx):
            # degenerate split (all points coincide): cut evenly in id order
            children = np.array_split(idx, k)
        # push in reverse so child 0 is processed first
        for c in reversed(children):
            stack.append((c, depth + 1))

    leaf_sizes = np.array([len(l) for l in leaves], dtype=np.int64)
    vec_lists = np.empty(X.count, dtype=np.int64)
    for i, l in enumerate(leaves):
        vec_lists[l] = i
    rep_ids = np.array(
        [select_representative(data[l], centroids[i], l) for i, l in enumerate(leaves)],
        dtype=np.int64,
    )
    return ClusterAssignment(
        centroids=np.array(centroids),
        rep_ids=rep_ids,
        vec_ptr=np.arange(X.count + 1, dtype=np.int64),
        vec_lists=vec_lists,
        leaf_sizes=leaf_sizes,
        info={"leaf_capacity": cap, "list_capacity": cfg.list_capacity(X)},
    )


def select_representative(members, centroid, ids=None) -> int:
    """Id of the member closest (squared L2) to ``centroid``; ties to the smaller id."""
    members = np.asarray(members)
    if members.ndim != 2 or members.shape[0] == 0:
        raise InvalidArgumentError("cluster has no members")
    ids = np.arange(members.shape[0]) if ids is None else np.asarray(ids)
    d = distances(np.asarray(centroid, dtype=np.float64), members, Metric.L2)
    best = np.flatnonzero(d == d.min())
    return int(ids[best].min())


# --------------------------------------------------------------------------
# closure assignment


def rng_filter(x, ordered_clusters, metric: Metric | str = Metric.L2,
               all_kept: bool = True) -> list:
    """Relative-neighborhood thinning of an ascending candidate list.

    ``ordered_clusters`` is a sequence of ``(cluster_id, rep_vector)``.  The
    first candidate is always kept; a later ``c_j`` is dropped when
    ``d(c_j, x) > d(c_p, c_j)`` for some kept ``c_p`` (or for the previously
    kept one only when ``all_kept`` is false).
    """
    metric = Metric.parse(metric)
    x = np.asarray(x)
    kept: list = []
    for cid, rep in ordered_clusters:
        rep = np.asarray(rep)
        if kept:
            dx = _pair(rep, x, metric)
            against = kept if all_kept else kept[-1:]
            if any(dx > _pair(prev, rep, metric) for _, prev in against):
                continue
        kept.append((cid, rep))
    return [cid for cid, _ in kept]


def _pair(a, b, metric):
    return distances(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)[None, :], metric)[0]


def closure_assign(x, reps, epsilon1: float = 10.0, max_replicas: int = 8,
                   metric: Metric | str = Metric.L2, use_rng: bool = True,
                   all_kept: bool = True) -> list[int]:
    """Clusters a single vector joins, nearest first.

    Candidates within the ``(1 + epsilon1)`` slack of the nearest
    representative are kept in ascending order, cut to ``max_replicas`` and
    then passed through :func:`rng_filter`.  Ties order by cluster id.
    """
    metric = Metric.parse(metric)
    reps = np.asarray(reps)
    d = distances(np.asarray(x), reps, metric)
    order = np.lexsort((np.arange(len(d)), d))
    ok = within_slack(d[order], d[order[0]], epsilon1, metric)
    chosen = order[ok][:max_replicas]
    if not use_rng:
        return chosen.tolist()
    return rng_filter(x, [(int(c), reps[c]) for c in chosen], metric, all_kept)


def closure_assign_batch(data: np.ndarray, reps: np.ndarray, cfg: BalancedClusteringConfig,
                         chunk: int = 4096):
    """Vectorized :func:`closure_assign` over all rows of ``data``.

    Returns CSR ``(ptr, lists, dists)`` with each row's clusters ascending by
    distance.  A BLAS pass shortlists candidates, which are then re-ranked
    with the exact distance kernel.
    """
    metric = cfg.metric
    n = data.shape[0]
    N = reps.shape[0]
    T = min(N, max(cfg.max_replicas + 8, cfg.shortlist))
    R = min(cfg.max_replicas, N)
    repsf = np.ascontiguousarray(reps)
    all_lists, all_d, counts = [], [], np.zeros(n, dtype=np.int64)
    for s in range(0, n, chunk):
        block = data[s:s + chunk]
        approx = pairwise(block, repsf, metric)
        if T < N:
            cand = np.argpartition(approx, T - 1, axis=1)[:, :T]
        else:
            cand = np.tile(np.arange(N), (block.shape[0], 1))
        cand = np.ascontiguousarray(cand, dtype=np.int64)
        exact = np.empty(cand.shape, dtype=np.float64)
        _kernels.exact_rows(np.ascontiguousarray(block), repsf, cand, metric is Metric.L2, exact)
        order = np.lexsort((cand, exact), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)[:, :R]
        exact = np.take_along_axis(exact, order, axis=1)[:, :R]
        ok = within_slack(exact, exact[:, :1], cfg.epsilon1, metric)
        # rows are sorted, so the slack rule keeps a prefix
        valid = ok.sum(axis=1).astype(np.int64)
        if cfg.rng_filter:
            pos = np.zeros((block.shape[0], R), dtype=np.int64)
            kept = np.zeros(block.shape[0], dtype=np.int64)
            _kernels.rng_select(np.ascontiguousarray(cand), np.ascontiguousarray(exact), valid,
                                repsf, metric is Metric.L2, cfg.rng_all_kept, pos, kept)
        else:
            pos = np.tile(np.arange(R), (block.shape[0], 1))
            kept = valid
        mask = np.arange(R)[None, :] < kept[:, None]
        all_lists.append(np.take_along_axis(cand, pos, axis=1)[mask])
        all_d.append(np.take_along_axis(exact, pos, axis=1)[mask])
        counts[s:s + chunk] = kept
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ptr, np.concatenate(all_lists).astype(np.int64), np.concatenate(all_d)


# --------------------------------------------------------------------------
# full partition


def build_partition(X: Dataset, cfg: BalancedClusteringConfig) -> ClusterAssignment:
    """Hierarchical clustering, representative selection and closure assignment.

    Every vector asks to join its closure lists (nearest representative
    first).  Requests are admitted by rank, so all nearest-list requests are
    served before any second-nearest one, and a list never exceeds the
    posting capacity.  A vector whose requests were all refused falls back to
    the leaf it was clustered into; leaves fit the capacity by construction,
    so coverage and the byte bound hold together.  Refused nearest-list
    requests are counted in ``info["closest_refused"]``.
    """
    hc = hierarchical_balanced_cluster(X, cfg)
    return _assign(X, hc.rep_ids, hc.vec_lists, cfg, centroids=hc.centroids,
                   leaf_sizes=hc.leaf_sizes, info=dict(hc.info))


def random_partition(X: Dataset, num_lists: int, cfg: BalancedClusteringConfig) -> ClusterAssignment:
    """Ablation baseline: random data points as representatives, same closure rules.

    The fallback list of a vector is its nearest representative's list.
    """
    if not 1 <= num_lists <= X.count:
        raise InvalidArgumentError("num_lists must be in [1, |X|]")
    rng = np.random.default_rng(cfg.seed)
    rep_ids = np.sort(rng.choice(X.count, size=num_lists, replace=False)).astype(np.int64)
    ptr, lists, dists = closure_assign_batch(X.data, X.data[rep_ids], cfg)
    home = lists[ptr[:-1]]
    leaf_sizes = np.bincount(home, minlength=num_lists)
    cap = cfg.list_capacity(X)
    if leaf_sizes.max() > cap:
        raise InvalidArgumentError(
            f"random representatives give a {leaf_sizes.max()}-entry cell (capacity {cap})"
        )
    return _assign(X, rep_ids, home, cfg, centroids=X.data[rep_ids].astype(np.float64),
                   leaf_sizes=leaf_sizes, info={"list_capacity": cap},
                   closure=(ptr, lists, dists))


def _assign(X, rep_ids, home, cfg, centroids, leaf_sizes, info, closure=None):
    cap = cfg.list_capacity(X)
    n = X.count
    if closure is None:
        closure = closure_assign_batch(X.data, X.data[rep_ids], cfg)
    ptr, lists, dists = closure
    owner = np.repeat(np.arange(n), np.diff(ptr))
    rank = np.arange(len(lists)) - ptr[owner]
    fallback = np.zeros(n, dtype=bool)
    for _ in range(n + 1):
        f_ids = np.flatnonzero(fallback)
        # fallback requests outrank everything and are never refused
        o = np.concatenate([owner, f_ids])
        l = np.concatenate([lists, home[f_ids]])
        r = np.concatenate([rank, np.full(len(f_ids), -1)])
        d = np.concatenate([dists, np.zeros(len(f_ids))])
        keep = _admit(o, l, r, d, cap)
        # a fallback that duplicates an admitted request is redundant
        covered = np.bincount(o[keep], minlength=n) > 0
        uncovered = ~covered
        if not uncovered.any():
            break
        fallback |= uncovered
    dropped = int(len(lists) - keep[:len(lists)].sum())
    o, l, r, d = o[keep], l[keep], r[keep], d[keep]
    # drop duplicate (vector, list) pairs created by fallbacks, then order
    # each vector's lists by ascending distance (fallback last if distinct)
    dist_key = np.where(r < 0, np.inf, d)
    order = np.lexsort((l, dist_key, o))
    o, l, dist_key = o[order], l[order], dist_key[order]
    pair = o * (len(rep_ids) + 1) + l
    _, first = np.unique(pair, return_index=True)
    sel = np.sort(first)
    o, l = o[sel], l[sel]
    counts = np.bincount(o, minlength=n)
    vec_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    nearest = lists[ptr[:-1]]
    got_nearest = np.zeros(n, dtype=bool)
    got_nearest[o[l == nearest[o]]] = True
    info = dict(info)
    info.update(
        list_capacity=cap,
        closest_refused=int((~got_nearest).sum()),
        fallbacks=int(fallback.sum()),
        requested=int(len(lists)),
    )
    return ClusterAssignment(
        centroids=np.asarray(centroids, dtype=np.float64),
        rep_ids=np.asarray(rep_ids, dtype=np.int64),
        vec_ptr=vec_ptr,
        vec_lists=l.astype(np.int64),
        leaf_sizes=np.asarray(leaf_sizes, dtype=np.int64),
        dropped=dropped,
        info=info,
    )


def _admit(owner, lists, rank, dists, cap):
    """Seat requests list by list in (rank, distance, vector id) order."""
    order = np.lexsort((owner, dists, rank))
    by_list = order[np.argsort(lists[order], kind="stable")]
    sorted_lists = lists[by_list]
    seat = np.arange(len(by_list)) - np.searchsorted(sorted_lists, sorted_lists, side="left")
    keep = np.zeros(len(lists), dtype=bool)
    keep[by_list] = seat < cap
    return keep
