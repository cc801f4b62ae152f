"""Ground truth, tie-aware recall, latency percentiles, VQ capacity and sweeps."""

from __future__ import annotations

import csv
import math
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InvalidArgumentError
from .vectors import Dataset, Metric, distances

TIE_RTOL = 1e-6


@dataclass(eq=False)
class GroundTruth:
    """Per-query top-R ids and distances, ascending."""

    ids: np.ndarray
    dists: np.ndarray
    exact_ties: bool = False  # integer distance accumulation: compare exactly

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.dists = np.asarray(self.dists, dtype=np.float64)
        if self.ids.ndim != 2 or self.ids.shape != self.dists.shape:
            raise InvalidArgumentError("ground truth ids and dists must be equal-shape matrices")
        if self.ids.size and np.any(np.diff(self.dists, axis=1) < 0):
            raise InvalidArgumentError("ground truth distances must be non-decreasing")

    @property
    def num_queries(self) -> int:
        return self.ids.shape[0]

    @property
    def depth(self) -> int:
        return self.ids.shape[1]


def _rows(x) -> np.ndarray:
    return x.data if isinstance(x, Dataset) else np.asarray(x)


def _smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest distances, ties broken by position (= id)."""
    if k < len(d):
        part = np.argpartition(d, k - 1)[:k]
        pool = np.flatnonzero(d <= d[part].max())
    else:
        pool = np.arange(len(d))
    return pool[np.lexsort((pool, d[pool]))][:k]


def brute_force_topk(X, queries, k: int, metric: Metric | str = Metric.L2,
                     threads: int = 1) -> GroundTruth:
    """Exact top-``k`` of every query by linear scan; ties by ascending id."""
    data, Q = _rows(X), _rows(queries)
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if Q.ndim != 2 or data.ndim != 2 or Q.shape[1] != data.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: queries {Q.shape}, data {data.shape}")
    k = min(k, data.shape[0])

    def one(q):
        d = distances(q, data, metric)
        pos = _smallest(d, k)
        return pos, d[pos]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, Q))
    else:
        out = [one(q) for q in Q]
    ids = np.array([o[0] for o in out], dtype=np.int64).reshape(len(Q), k)
    dd = np.array([o[1] for o in out], dtype=np.float64).reshape(len(Q), k)
    return GroundTruth(ids, dd, exact_ties=data.dtype.kind in "iu" and Q.dtype.kind in "iu")


def _same(a: float, b: float, exact: bool) -> bool:
    if exact:
        return a == b
    return abs(a - b) <= TIE_RTOL * max(abs(a), abs(b))


def query_recall(returned_ids, returned_dists, gt_ids, gt_dists, R: int, exact: bool = False) -> float:
    """Recall of one query: id matches first, then equal-distance substitutions."""
    gid = [int(i) for i in gt_ids[:R]]
    gd = [float(x) for x in gt_dists[:R]]
    taken = [False] * R
    slot = {g: j for j, g in enumerate(gid)}
    seen, rest, hits = set(), [], 0
    for n, i in enumerate(list(returned_ids)[:R]):
        i = int(i)
        if i in seen:
            continue
        seen.add(i)
        j = slot.get(i)
        if j is not None and not taken[j]:
            taken[j] = True
            hits += 1
        elif returned_dists is not None:
            rest.append(float(returned_dists[n]))
    for d in sorted(rest):
        for j in range(R):
            if not taken[j] and _same(d, gd[j], exact):
                taken[j] = True
                hits += 1
                break
    return hits / R


def per_query_recall(ids, gt: GroundTruth, R: int, dists=None) -> np.ndarray:
    if R < 1 or R > gt.depth:
        raise InvalidArgumentError(f"R={R} outside ground-truth depth {gt.depth}")
    if len(ids) != gt.num_queries:
        raise InvalidArgumentError("result and ground-truth query counts differ")
    return np.array([
        query_recall(ids[i], None if dists is None else dists[i], gt.ids[i], gt.dists[i], R,
                     gt.exact_ties)
        for i in range(len(ids))
    ])


def recall_at_r(ids, gt: GroundTruth, R: int, dists=None) -> float:
    """Mean recall@R of returned id lists; ``dists`` enables tie substitution."""
    return float(per_query_recall(ids, gt, R, dists).mean())


# --------------------------------------------------------------------------
# VQ capacity


def peak_rss_kb() -> float | None:
    try:
        return float(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)  # KB on Linux
    except (OSError, ValueError):
        return None


def vq_capacity(num_vectors: int, vector_bytes: int, qps: float,
                memory_kb: float | None = None) -> float:
    """Vectors per KB of serving memory times queries per second.

    ``memory_kb`` is the measured footprint; without it the raw vector bytes
    are used.
    """
    if num_vectors < 0 or vector_bytes < 0 or qps < 0:
        raise InvalidArgumentError("vq_capacity inputs must be non-negative")
    if qps == 0:
        return 0.0
    kb = memory_kb if memory_kb is not None else num_vectors * vector_bytes / 1024.0
    if kb <= 0:
        raise InvalidArgumentError("memory footprint must be positive")
    return num_vectors / kb * qps


# --------------------------------------------------------------------------
# reports


def nearest_rank(values, p: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return 0.0
    r = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[r - 1])


@dataclass
class EvalReport:
    max_k: int = 0
    epsilon2: float = 0.0
    num_queries: int = 0
    recall: dict[int, float] = field(default_factory=dict)
    latency_mean: float = 0.0
    latency_p50: float = 0.0
    latency_p90: float = 0.0
    latency_p99: float = 0.0
    qps: float = 0.0
    vq: float = 0.0
    vq_source: str = "formula"
    mean_lists_probed: float = 0.0
    mean_bytes_read: float = 0.0

    def row(self) -> dict:
        d = asdict(self)
        rec = d.pop("recall")
        for r in sorted(rec):
            d[f"recall@{r}"] = rec[r]
        return d


def report_from_results(results, gt: GroundTruth | None, Rs=(1, 10), num_vectors: int = 0,
                        vector_bytes: int = 0, wall_s: float | None = None,
                        memory_kb: float | None = None, **extra) -> EvalReport:
    lat = np.array([r.latency_ms for r in results])
    rep = EvalReport(num_queries=len(results), **extra)
    if gt is not None:
        ids = [r.ids for r in results]
        dd = [r.dists for r in results]
        rep.recall = {R: recall_at_r(ids, gt, R, dd) for R in Rs if R <= gt.depth}
    rep.latency_mean = float(lat.mean()) if lat.size else 0.0
    rep.latency_p50, rep.latency_p90, rep.latency_p99 = (nearest_rank(lat, p) for p in (50, 90, 99))
    wall = wall_s if wall_s is not None else lat.sum() / 1000.0
    rep.qps = len(results) / wall if wall > 0 else 0.0
    rep.vq_source = "rss" if memory_kb is not None else "formula"
    rep.vq = vq_capacity(num_vectors, vector_bytes, rep.qps, memory_kb) if num_vectors else 0.0
    rep.mean_lists_probed = float(np.mean([r.stats.lists_probed for r in results])) if results else 0.0
    rep.mean_bytes_read = float(np.mean([r.stats.io.bytes_read for r in results])) if results else 0.0
    return rep


def evaluate(index, queries, gt: GroundTruth | None, params, Rs=(1, 10), threads: int = 1,
             measure_memory: bool = False) -> EvalReport:
    """Search all queries and summarize recall, latency, VQ and IO."""
    from .searcher import batch_search

    t0 = time.perf_counter()
    results = batch_search(index, queries, params, threads=threads)
    wall = time.perf_counter() - t0
    elem_bytes = index.reader.itemsize * index.dim
    return report_from_results(results, gt, Rs, num_vectors=index.num_vectors,
                               vector_bytes=elem_bytes, wall_s=wall,
                               memory_kb=peak_rss_kb() if measure_memory else None,
                               max_k=params.max_k, epsilon2=params.epsilon2)


def run_sweep(index, queries, gt: GroundTruth, max_ks, epsilon2s=None, k: int = 10,
              Rs=(1, 10), threads: int = 1, ef=None, csv_path=None, dat_path=None) -> list[EvalReport]:
    """Evaluate every (maxK, epsilon2) grid point; one report row per point."""
    from .searcher import SearchParams

    max_ks = list(max_ks)
    eps = list(epsilon2s) if epsilon2s is not None else [SearchParams().epsilon2]
    if not max_ks or not eps:
        raise InvalidArgumentError("empty sweep")
    rows = [evaluate(index, queries, gt, SearchParams(k=k, max_k=m, epsilon2=e, ef=ef), Rs, threads)
            for e in eps for m in max_ks]
    if csv_path:
        write_report_csv(rows, csv_path)
    if dat_path:
        write_gnuplot(rows, dat_path)
    return rows


_SCALARS = {f.name: f.type for f in fields(EvalReport) if f.name != "recall"}


def write_report_csv(rows: list[EvalReport], path) -> None:
    recalls = sorted({r for row in rows for r in row.recall})
    header = [n for n in _SCALARS] + [f"recall@{r}" for r in recalls]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            d = row.row()
            w.writerow([repr(d[h]) if isinstance(d.get(h), float) else d.get(h, "") for h in header])


def read_report_csv(path) -> list[EvalReport]:
    out = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rep = EvalReport()
            for key, val in rec.items():
                if key.startswith("recall@"):
                    if val != "":
                        rep.recall[int(key[7:])] = float(val)
                elif key in ("max_k", "num_queries"):
                    setattr(rep, key, int(val))
                elif key == "vq_source":
                    rep.vq_source = val
                else:
                    setattr(rep, key, float(val))
            out.append(rep)
    return out


def write_gnuplot(rows: list[EvalReport], path, R: int = 10) -> None:
    """Whitespace-separated recall vs probes/latency, one block per epsilon2."""
    with open(path, "w") as f:
        f.write(f"# max_k epsilon2 recall@{R} mean_lists_probed latency_mean_ms\n")
        last = None
        for r in rows:
            if last is not None and r.epsilon2 != last:
                f.write("\n\n")
            last = r.epsilon2
            f.write(f"{r.max_k} {r.epsilon2!r} {r.recall.get(R, float('nan'))!r} "
                    f"{r.mean_lists_probed!r} {r.latency_mean!r}\n")


def probes_at_recall(rows: list[EvalReport], target: float, R: int = 10) -> float:
    """Mean lists probed where the recall curve first reaches ``target``.

    Linear interpolation between the bracketing sweep points; ``inf`` when the
    sweep never reaches the target.
    """
    pts = sorted((r.mean_lists_probed, r.recall[R]) for r in rows)
    prev = None
    for probes, rec in pts:
        if rec >= target:
            if prev is None or prev[1] >= rec:
                return probes
            p0, r0 = prev
            return p0 + (target - r0) * (probes - p0) / (rec - r0)
        prev = (probes, rec)
    return math.inf
