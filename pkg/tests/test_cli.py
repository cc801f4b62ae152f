import csv

import numpy as np
import pytest

from spann.cli import load_ground_truth, main, parse_args, read_results
from spann.datasets import gaussian_mixture
from spann.evaluation import brute_force_topk
from spann.posting_store import POSTINGS_FILE
from spann.vectors import Dataset, write_vector_file


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    X, c = gaussian_mixture(1500, dim=8, components=12, seed=4)
    Q, _ = gaussian_mixture(30, dim=8, seed=5, centers=c)
    write_vector_file(Dataset(X), d / "base.fvecs")
    write_vector_file(Dataset(Q), d / "query.fvecs")
    return d, X, Q


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline(files, capsys):
    d, X, Q = files
    base, qry, idx = d / "base.fvecs", d / "query.fvecs", d / "idx"
    assert run("build", "--input", base, "--index-dir", idx, "--leaf-size", 10) == 0
    assert (idx / POSTINGS_FILE).exists()

    assert run("gt", "--input", base, "--queries", qry, "--k", 20, "--out", d / "gt") == 0
    gt = load_ground_truth(str(d / "gt"))
    ref = brute_force_topk(X, Q, 20)
    assert np.array_equal(gt.ids, ref.ids)

    res = d / "res.txt"
    assert run("search", "--index-dir", idx, "--queries", qry, "--k", 10,
               "--max-k", 200, "--epsilon2", "inf", "--out", res) == 0
    ids, dists = read_results(str(res))
    assert len(ids) == 30
    assert all(np.array_equal(a, b) for a, b in zip(ids, ref.ids[:, :10]))
    line = res.read_text().splitlines()[0].split("\t")
    assert len(line) == 10 and ":" in line[0]
    assert len((d / "res.txt.latency").read_text().splitlines()) == 31

    capsys.readouterr()
    rep = d / "rep.csv"
    assert run("eval", "--results", res, "--gt", d / "gt", "--num-vectors", 1500,
               "--vector-bytes", 32, "--out", rep) == 0
    out = capsys.readouterr().out
    assert "recall@10\t1.0000" in out and "recall@1\t1.0000" in out
    row = next(csv.DictReader(open(rep)))
    assert float(row["recall@10"]) == 1.0 and float(row["vq"]) > 0

    sw, dat = d / "sweep.csv", d / "sweep.dat"
    assert run("sweep", "--index-dir", idx, "--queries", qry, "--gt", d / "gt",
               "--max-k", "1,4,16", "--epsilon2", "0.6,7", "--out", sw, "--dat", dat) == 0
    rows = list(csv.DictReader(open(sw)))
    assert len(rows) == 6
    assert dat.exists()


def test_dsim(files, capsys):
    d, *_ = files
    plan, out = d / "plan.bin", d / "machines.csv"
    assert run("dsim", "--input", d / "base.fvecs", "--queries", d / "query.fvecs",
               "--machines", 2, "--subpartitions", 6, "--max-k", 2, "--plan", plan,
               "--out", out) == 0
    text = capsys.readouterr().out
    assert "mean fan-out" in text and "vector inflation" in text
    assert plan.exists() and len(out.read_text().splitlines()) == 3
    assert run("dsim", "--input", d / "base.fvecs", "--queries", d / "query.fvecs",
               "--machines", 2, "--baseline") == 0
    assert "mean fan-out: 2.000" in capsys.readouterr().out


def test_config_precedence(files, tmp_path):
    d, *_ = files
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nindex-dir = /some/idx\nmax_k = 5\nepsilon2 = 0.6\n"
                    "leaf-size = 3\nqueries = q.fvecs\n")
    a = parse_args(["search", "--config", str(conf), "--out", "o", "--max-k", "9"])
    assert a.index_dir == "/some/idx" and a.queries == "q.fvecs"
    assert a.max_k == 9 and a.epsilon2 == 0.6


def test_config_unknown_key(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("bogus = 1\n")
    with pytest.raises(SystemExit):
        parse_args(["search", "--config", str(conf)])


def test_missing_file_is_an_error(tmp_path, capsys):
    assert run("build", "--input", tmp_path / "nope.fvecs", "--index-dir", tmp_path / "i") == 1
    assert "error" in capsys.readouterr().err
