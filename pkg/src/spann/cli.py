"""Command-line entry point: build, gt, search, eval, sweep, dsim."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .clustering import BalancedClusteringConfig
from .errors import SpannError
from .evaluation import (
    EvalReport,
    GroundTruth,
    brute_force_topk,
    nearest_rank,
    recall_at_r,
    run_sweep,
    vq_capacity,
    write_report_csv,
)
from .searcher import SearchParams, SpannIndex, batch_search, build_index
from .vectors import Dataset, read_vector_file, write_vector_file

def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def load_dataset(path: str, fmt: str | None) -> Dataset:
    return read_vector_file(path, fmt)


def read_config(path: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  Keys use flag names."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpannError(f"{path}:{n}: expected key=value")
            k, v = (p.strip() for p in line.split("=", 1))
            out[k.lstrip("-").replace("-", "_")] = v
    return out


# --------------------------------------------------------------------------
# ground truth / results files


def save_ground_truth(gt: GroundTruth, prefix: str) -> None:
    write_vector_file(Dataset(gt.ids.astype(np.int32), "int32"), prefix + ".ivecs")
    write_vector_file(Dataset(gt.dists.astype(np.float32), "float32"), prefix + ".fvecs")


def load_ground_truth(prefix: str, exact_ties: bool = False) -> GroundTruth:
    ids = read_vector_file(prefix + ".ivecs").data
    dists = read_vector_file(prefix + ".fvecs").data
    return GroundTruth(ids, dists, exact_ties)


def write_results(results, path: str) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write("\t".join(f"{i}:{d!r}" for i, d in r.hits) + "\n")
    with open(path + ".latency", "w") as f:
        f.write("latency_ms\tlists_probed\tbytes_read\n")
        for r in results:
            f.write(f"{r.latency_ms!r}\t{r.stats.lists_probed}\t{r.stats.io.bytes_read}\n")


def read_results(path: str):
    ids, dists = [], []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            pairs = [p.split(":") for p in line.split("\t") if p]
            ids.append(np.array([int(a) for a, _ in pairs], dtype=np.int64))
            dists.append(np.array([float(b) for _, b in pairs]))
    return ids, dists


def read_latency(path: str) -> np.ndarray | None:
    try:
        return np.loadtxt(path + ".latency", skiprows=1, ndmin=2)
    except OSError:
        return None


# --------------------------------------------------------------------------
# commands


def cmd_build(a) -> int:
    X = load_dataset(a.input, a.format)
    cfg = BalancedClusteringConfig(
        k=a.branch_k, lam=a.lam, posting_limit_bytes=a.posting_limit_bytes,
        max_replicas=a.replicas, epsilon1=a.epsilon1, seed=a.seed, leaf_size=a.leaf_size,
        metric=a.metric)
    t0 = time.perf_counter()
    asg = build_index(X, a.index_dir, cfg, navigator=a.navigator, graph_degree=a.graph_degree,
                      partition=a.partition, num_lists=a.num_lists)
    print(f"built {asg.num_lists} posting lists over {X.count} vectors in "
          f"{time.perf_counter() - t0:.1f}s (mean replicas {asg.replicas.mean():.3f})")
    return 0


def cmd_gt(a) -> int:
    X = load_dataset(a.input, a.format)
    Q = load_dataset(a.queries, a.format)
    gt = brute_force_topk(X, Q, a.k, a.metric, threads=a.threads)
    save_ground_truth(gt, a.out)
    print(f"wrote {a.out}.ivecs and {a.out}.fvecs ({gt.num_queries} queries, depth {gt.depth})")
    return 0


def _params(a) -> SearchParams:
    return SearchParams(k=a.k, max_k=a.max_k, epsilon2=a.epsilon2, ef=a.ef)


def cmd_search(a) -> int:
    Q = load_dataset(a.queries, a.format)
    with SpannIndex.open(a.index_dir) as idx:
        results = batch_search(idx, Q, _params(a), threads=a.threads)
    write_results(results, a.out)
    lat = [r.latency_ms for r in results]
    print(f"{len(results)} queries, mean latency {np.mean(lat):.3f} ms, "
          f"p99 {nearest_rank(lat, 99):.3f} ms")
    return 0


def cmd_eval(a) -> int:
    ids, dists = read_results(a.results)
    gt = load_ground_truth(a.gt, exact_ties=a.format == "bvecs")
    rep = EvalReport(num_queries=len(ids))
    rep.recall = {R: recall_at_r(ids, gt, R, dists) for R in a.recall_at if R <= gt.depth}
    side = read_latency(a.results)
    if side is not None and len(side):
        lat = side[:, 0]
        rep.latency_mean = float(lat.mean())
        rep.latency_p50, rep.latency_p90, rep.latency_p99 = (nearest_rank(lat, p) for p in (50, 90, 99))
        rep.qps = 1000.0 / rep.latency_mean if rep.latency_mean > 0 else 0.0
        rep.mean_lists_probed = float(side[:, 1].mean())
        rep.mean_bytes_read = float(side[:, 2].mean())
    if a.num_vectors and a.vector_bytes:
        rep.vq = vq_capacity(a.num_vectors, a.vector_bytes, rep.qps, a.memory_kb)
        rep.vq_source = "measured" if a.memory_kb else "formula"
    for R, v in sorted(rep.recall.items()):
        print(f"recall@{R}\t{v:.4f}")
    print(f"latency ms mean/p50/p90/p99\t{rep.latency_mean:.3f}/{rep.latency_p50:.3f}/"
          f"{rep.latency_p90:.3f}/{rep.latency_p99:.3f}")
    if a.out:
        write_report_csv([rep], a.out)
    return 0


def cmd_sweep(a) -> int:
    Q = load_dataset(a.queries, a.format)
    gt = load_ground_truth(a.gt, exact_ties=a.format == "bvecs")
    with SpannIndex.open(a.index_dir) as idx:
        rows = run_sweep(idx, Q, gt, _ints(a.max_k_list), _floats(a.epsilon2_list), k=a.k,
                         Rs=a.recall_at, threads=a.threads, ef=a.ef, csv_path=a.out,
                         dat_path=a.dat)
    for r in rows:
        rec = " ".join(f"R@{R}={v:.4f}" for R, v in sorted(r.recall.items()))
        print(f"maxK={r.max_k}\teps2={r.epsilon2}\t{rec}\tprobes={r.mean_lists_probed:.1f}\t"
              f"lat={r.latency_mean:.3f}ms")
    return 0


def cmd_dsim(a) -> int:
    from .distributed import (build_partition_plan, random_partition_baseline, save_plan,
                              simulate_dispatch, split_queries)

    X = load_dataset(a.input, a.format)
    train, _valid, test = split_queries(load_dataset(a.queries, a.format))
    params = _params(a)
    if a.baseline:
        plan = random_partition_baseline(X, a.machines, a.seed, a.metric)
    else:
        cfg = BalancedClusteringConfig(lam=a.lam, max_replicas=a.replicas, epsilon1=a.epsilon1,
                                       seed=a.seed, metric=a.metric)
        plan = build_partition_plan(X, train, a.subpartitions, a.machines, cfg, params)
    if a.plan:
        save_plan(plan, a.plan)
    rep = simulate_dispatch(plan, X, test, params)
    print(rep.summary())
    print(f"vector inflation: {plan.inflation(X.count):.3f}")
    if a.out:
        rep.write_csv(a.out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spann", description="Disk-resident ANN index tools.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)
    p.subcommands = sub.choices

    def common(sp):
        sp.add_argument("--config", help="key=value file; command-line flags take precedence")
        sp.add_argument("--format", choices=["fvecs", "bvecs"], default=None,
                        help="vector file format (default: file suffix)")
        sp.add_argument("--metric", choices=["l2", "ip"], default="l2")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)

    def search_flags(sp):
        sp.add_argument("--k", type=int, default=10)
        sp.add_argument("--max-k", dest="max_k", type=int, default=64)
        sp.add_argument("--epsilon2", type=float, default=7.0)
        sp.add_argument("--ef", type=int, default=None)

    def cluster_flags(sp):
        sp.add_argument("--epsilon1", type=float, default=10.0)
        sp.add_argument("--replicas", type=int, default=8)
        sp.add_argument("--lambda", dest="lam", type=float, default=1.0)

    b = sub.add_parser("build", help="dataset -> index directory")
    common(b); cluster_flags(b)
    b.add_argument("--input", required=True)
    b.add_argument("--index-dir", dest="index_dir", required=True)
    b.add_argument("--posting-limit-bytes", dest="posting_limit_bytes", type=int, default=None)
    b.add_argument("--branch-k", dest="branch_k", type=int, default=8)
    b.add_argument("--leaf-size", dest="leaf_size", type=int, default=None)
    b.add_argument("--navigator", choices=["exact", "graph"], default="exact")
    b.add_argument("--graph-degree", dest="graph_degree", type=int, default=32)
    b.add_argument("--partition", choices=["hbc", "random"], default="hbc")
    b.add_argument("--num-lists", dest="num_lists", type=int, default=None)
    b.set_defaults(func=cmd_build)

    g = sub.add_parser("gt", help="brute-force ground truth (ivecs ids + fvecs distances)")
    common(g)
    g.add_argument("--input", required=True)
    g.add_argument("--queries", required=True)
    g.add_argument("--k", type=int, default=100)
    g.add_argument("--out", required=True, help="output prefix")
    g.set_defaults(func=cmd_gt)

    s = sub.add_parser("search", help="index + queries -> results file")
    common(s); search_flags(s)
    s.add_argument("--index-dir", dest="index_dir", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="results + ground truth -> report")
    common(e)
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True, help="ground-truth prefix")
    e.add_argument("--recall-at", dest="recall_at", type=_ints, default=[1, 10])
    e.add_argument("--num-vectors", dest="num_vectors", type=int, default=0)
    e.add_argument("--vector-bytes", dest="vector_bytes", type=int, default=0)
    e.add_argument("--memory-kb", dest="memory_kb", type=float, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="recall/latency over a maxK (and epsilon2) grid")
    common(w)
    w.add_argument("--index-dir", dest="index_dir", required=True)
    w.add_argument("--queries", required=True)
    w.add_argument("--gt", required=True)
    w.add_argument("--k", type=int, default=10)
    w.add_argument("--max-k", dest="max_k_list", default="1,2,4,8,16,32,64")
    w.add_argument("--epsilon2", dest="epsilon2_list", default="7.0")
    w.add_argument("--ef", type=int, default=None)
    w.add_argument("--recall-at", dest="recall_at", type=_ints, default=[1, 10])
    w.add_argument("--out", default=None, help="CSV report")
    w.add_argument("--dat", default=None, help="gnuplot data file")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("dsim", help="distributed partition + dispatch simulation")
    common(d); search_flags(d); cluster_flags(d)
    d.add_argument("--input", required=True)
    d.add_argument("--queries", required=True, help="split into train/valid/test thirds")
    d.add_argument("--machines", type=int, default=8)
    d.add_argument("--subpartitions", type=int, default=64)
    d.add_argument("--baseline", action="store_true", help="random partition, all dispatch")
    d.add_argument("--plan", default=None, help="write the plan file here")
    d.add_argument("--out", default=None, help="per-machine CSV")
    d.set_defaults(func=cmd_dsim)
    return p


def _convert(action: argparse.Action, value: str):
    if isinstance(action, argparse._StoreTrueAction):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return action.type(value) if action.type is not None else value


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    ns, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in parser.subcommands), None)
    if ns.config and command:
        conf = read_config(ns.config)
        everywhere = {a.dest for sp in parser.subcommands.values() for a in sp._actions}
        unknown = set(conf) - everywhere
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub = parser.subcommands[command]
        # config values become defaults, so explicit flags still win;
        # keys belonging to other subcommands are ignored
        for act in sub._actions:
            if act.dest in conf:
                act.required = False
                sub.set_defaults(**{act.dest: _convert(act, conf[act.dest])})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SpannError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
