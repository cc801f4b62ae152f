import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spann.clustering import BalancedClusteringConfig, entry_bytes
from spann.datasets import gaussian_mixture
from spann.errors import CorruptionError, InvalidArgumentError
from spann.evaluation import brute_force_topk, per_query_recall
from spann.posting_store import POSTINGS_FILE
from spann.searcher import (
    SearchParams,
    SpannIndex,
    batch_search,
    build_index,
    dynamic_prune,
    min_probes_to_top1,
    search,
)
from spann.vectors import Dataset, distances

OFF = math.inf


def test_prune_examples():
    c = [(0, 0.5), (1, 0.7), (2, 0.9)]
    assert dynamic_prune(c, 0.6) == c[:2]
    assert dynamic_prune([(3, 1.0), (1, 1.0), (2, 1.0001)], 0.0) == [(3, 1.0), (1, 1.0)]
    assert dynamic_prune([(0, 0.0), (1, 0.0), (2, 0.01)], 100.0) == [(0, 0.0), (1, 0.0)]


def test_prune_squared_l2_uses_unsquared_scale():
    # stored squared distances 1, 4, 9 -> unsquared 1, 2, 3
    assert len(dynamic_prune([(0, 1.0), (1, 4.0), (2, 9.0)], 1.0, "l2")) == 2


def test_prune_empty():
    with pytest.raises(InvalidArgumentError):
        dynamic_prune([], 1.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0, 10), st.floats(0, 10))
def test_prune_prefix_and_monotone(ds, e1, e2):
    c = list(enumerate(sorted(ds)))
    lo, hi = sorted((e1, e2))
    a, b = dynamic_prune(c, lo), dynamic_prune(c, hi)
    assert a == c[:len(a)] and a[0] == c[0]
    assert len(a) <= len(b)
    assert all(d <= c[0][1] * (1 + lo) for _, d in a)


@pytest.mark.parametrize("kw", [dict(k=0), dict(max_k=0), dict(epsilon2=-1.0), dict(epsilon2=float("nan"))])
def test_params_validation(kw):
    with pytest.raises(InvalidArgumentError):
        SearchParams(**kw)


def test_params_per_workload():
    assert SearchParams.for_recall_at(1).epsilon2 == 0.6
    assert SearchParams.for_recall_at(10).epsilon2 == 7.0


@pytest.fixture(scope="module", params=["l2", "ip"])
def small(request, tmp_path_factory):
    X, c = gaussian_mixture(3000, dim=16, components=20, seed=1)
    Q, _ = gaussian_mixture(80, dim=16, seed=2, centers=c)
    X = Dataset(X)
    cfg = BalancedClusteringConfig(posting_limit_bytes=60 * entry_bytes(16, 4), leaf_size=12,
                                   metric=request.param)
    d = tmp_path_factory.mktemp("idx")
    asg = build_index(X, d, cfg)
    idx = SpannIndex.open(d)
    yield X, Q, idx, asg, request.param
    idx.close()


def test_query_equal_to_stored_vector(small):
    X, Q, idx, asg, metric = small
    if metric != "l2":
        pytest.skip("self-match is only guaranteed closest under L2")
    for i in (0, 123, 2999):
        r = search(idx, X.data[i], SearchParams(k=5, max_k=4, epsilon2=0.0))
        assert r.ids[0] == i and r.dists[0] == 0.0


def test_exhaustive_equivalence(small):
    X, Q, idx, asg, metric = small
    gt = brute_force_topk(X, Q, 10, metric)
    res = batch_search(idx, Q, SearchParams(k=10, max_k=idx.num_lists, epsilon2=OFF))
    for i, r in enumerate(res):
        assert r.ids.tolist() == gt.ids[i].tolist()
        assert r.dists.tolist() == gt.dists[i].tolist()


def test_results_contract(small):
    X, Q, idx, asg, metric = small
    for q in Q[:20]:
        r = search(idx, q, SearchParams(k=10, max_k=8))
        assert len(set(r.ids.tolist())) == len(r.ids) <= 10
        assert np.all(np.diff(r.dists) >= 0)
        np.testing.assert_array_equal(r.dists, distances(q, X.data[r.ids], metric))
        s = r.stats
        assert s.lists_probed + s.lists_pruned == s.lists_considered <= 8
        assert s.candidates_scanned >= len(r.ids)
        assert s.io.bytes_read >= s.candidates_scanned * entry_bytes(16, 4)


def test_dimension_mismatch(small):
    _, _, idx, _, _ = small
    with pytest.raises(InvalidArgumentError):
        search(idx, np.zeros(3, np.float32), SearchParams())


def test_batch_forms(small):
    X, Q, idx, _, _ = small
    p = SearchParams(k=7, max_k=6)
    single = search(idx, Q[0], p)
    one = batch_search(idx, Q[:1], p)
    assert one[0].hits == single.hits
    rep = batch_search(idx, np.repeat(Q[:1], 8, axis=0), p, threads=3)
    assert all(r.hits == single.hits for r in rep)
    seq = batch_search(idx, Q, p, threads=1)
    par = batch_search(idx, Dataset(Q), p, threads=4)
    assert [r.hits for r in seq] == [r.hits for r in par]


def test_monotone_recall_per_query(small):
    X, Q, idx, _, metric = small
    gt = brute_force_topk(X, Q, 10, metric)

    def rec(p):
        res = batch_search(idx, Q, p)
        return per_query_recall([r.ids for r in res], gt, 10, [r.dists for r in res])

    prev = None
    for mk in (1, 2, 3, 5, 8, 13, 21, idx.num_lists):
        cur = rec(SearchParams(k=10, max_k=mk, epsilon2=OFF))
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur
    prev = None
    for e in (0.0, 0.05, 0.1, 0.3, 0.6, 1.0, 7.0):
        cur = rec(SearchParams(k=10, max_k=16, epsilon2=e))
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur


def test_min_probes_diagnostic(small):
    X, Q, idx, _, metric = small
    gt = brute_force_topk(X, Q, 1, metric)
    probes = min_probes_to_top1(idx, Q, gt.ids[:, 0])
    assert probes.min() >= 1
    for i in range(0, len(Q), 9):
        r = search(idx, Q[i], SearchParams(k=1, max_k=int(probes[i]), epsilon2=OFF))
        assert r.ids[0] == gt.ids[i, 0]
        if probes[i] > 1:
            r = search(idx, Q[i], SearchParams(k=1, max_k=int(probes[i]) - 1, epsilon2=OFF))
            assert r.ids[0] != gt.ids[i, 0]


def test_uint8_index(tmp_path):
    rng = np.random.default_rng(0)
    X = Dataset(rng.integers(0, 256, (800, 32)).astype(np.uint8), "uint8")
    Q = rng.integers(0, 256, (10, 32)).astype(np.uint8)
    build_index(X, tmp_path, BalancedClusteringConfig(leaf_size=10), navigator="graph")
    with SpannIndex.open(tmp_path) as idx:
        gt = brute_force_topk(X, Q, 5)
        assert gt.exact_ties
        res = batch_search(idx, Q, SearchParams(k=5, max_k=idx.num_lists, epsilon2=OFF,
                                                ef=idx.num_lists))
        for i, r in enumerate(res):
            assert r.ids.tolist() == gt.ids[i].tolist()


def test_corruption_propagates(tmp_path):
    X, _ = gaussian_mixture(400, dim=8, seed=3)
    X = Dataset(X)
    build_index(X, tmp_path, BalancedClusteringConfig(leaf_size=10))
    p = tmp_path / POSTINGS_FILE
    raw = bytearray(p.read_bytes())
    raw[-4096 - 100] ^= 0xFF  # inside the last page-aligned lists region
    raw[8192 + 10] ^= 0xFF
    p.write_bytes(bytes(raw))
    idx = SpannIndex(tmp_path, warmup=False)
    with pytest.raises(CorruptionError):
        batch_search(idx, X.data[:50], SearchParams(k=3, max_k=idx.num_lists, epsilon2=OFF))
