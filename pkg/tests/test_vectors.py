import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from spann.errors import FormatError, InvalidArgumentError
from spann.vectors import (
    Dataset,
    Metric,
    distance,
    distances,
    read_vector_file,
    within_slack,
    write_vector_file,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_distance_examples():
    assert distance([0, 0], [3, 4], Metric.L2) == 25.0
    assert distance([1, 2, 3], [1, 2, 3], "l2") == 0.0
    assert distance([1, 0], [0.6, 0.8], Metric.IP) == pytest.approx(-0.6)


def test_distance_dim_mismatch():
    with pytest.raises(InvalidArgumentError):
        distance([1, 2], [1, 2, 3])
    with pytest.raises(InvalidArgumentError):
        distances(np.zeros(3), np.zeros((4, 2)))


def test_uint8_accumulates_without_overflow():
    a = np.full(4096, 255, dtype=np.uint8)
    b = np.zeros(4096, dtype=np.uint8)
    assert distance(a, b) == 4096 * 255 ** 2
    assert distance(a, a, "ip") == -(4096 * 255 ** 2)


def test_metric_parse():
    assert Metric.parse("IP") is Metric.IP
    with pytest.raises(InvalidArgumentError):
        Metric.parse("cosine")


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (3, 8), elements=finite))
def test_l2_symmetry_and_triangle(m):
    a, b, c = m
    assert distance(a, b) == distance(b, a)
    assert distance(a, a) == 0.0
    assert distance(a, b) >= 0
    lhs = np.sqrt(distance(a, c))
    assert lhs <= np.sqrt(distance(a, b)) + np.sqrt(distance(b, c)) + 1e-6 * (1 + lhs)


def test_slack_rule_unsquared():
    # squared distances 1, 4, 9 -> unsquared 1, 2, 3; eps=1 admits up to 2
    assert within_slack(np.array([1.0, 4.0, 9.0]), 1.0, 1.0, "l2").tolist() == [True, True, False]
    # negative inner products: threshold d1 + eps*|d1|
    assert within_slack(np.array([-10.0, -6.0, -4.0]), -10.0, 0.5, "ip").tolist() == [True, True, False]


def test_read_two_records(tmp_path):
    p = tmp_path / "x.fvecs"
    raw = b"".join(np.int32(2).tobytes() + np.array(r, "<f4").tobytes() for r in ([1, 2], [3, 4]))
    p.write_bytes(raw)
    ds = read_vector_file(p)
    assert (ds.count, ds.dim, ds.elem_type) == (2, 2, "float32")
    assert ds.data.tolist() == [[1, 2], [3, 4]]


def test_read_empty(tmp_path):
    p = tmp_path / "e.bvecs"
    p.write_bytes(b"")
    assert read_vector_file(p).count == 0


def test_inconsistent_dim_reports_record(tmp_path):
    p = tmp_path / "bad.fvecs"
    p.write_bytes(np.int32(2).tobytes() + np.zeros(2, "<f4").tobytes()
                  + np.int32(3).tobytes() + np.zeros(3, "<f4").tobytes())
    with pytest.raises(FormatError) as ei:
        read_vector_file(p)
    assert ei.value.record == 1


def test_truncated(tmp_path):
    p = tmp_path / "t.fvecs"
    p.write_bytes(np.int32(4).tobytes() + np.zeros(3, "<f4").tobytes())
    with pytest.raises(FormatError):
        read_vector_file(p)


def test_write_type_mismatch(tmp_path):
    ds = Dataset(np.zeros((2, 3), np.uint8), "uint8")
    with pytest.raises(InvalidArgumentError):
        write_vector_file(ds, tmp_path / "x.fvecs")


def test_write_empty_is_zero_length(tmp_path):
    p = tmp_path / "e.fvecs"
    write_vector_file(Dataset(np.zeros((0, 0), np.float32)), p)
    assert p.stat().st_size == 0


def test_write_error_has_path(tmp_path):
    target = tmp_path / "missing" / "x.fvecs"
    with pytest.raises(OSError) as ei:
        write_vector_file(Dataset(np.zeros((1, 2), np.float32)), target)
    assert str(target) in str(ei.value)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["fvecs", "bvecs", "ivecs"]), st.integers(0, 6), st.integers(1, 9),
       st.integers(0, 2**31 - 1))
def test_round_trip_bit_exact(tmp_path_factory, fmt, n, dim, seed):
    rng = np.random.default_rng(seed)
    if fmt == "fvecs":
        data = rng.standard_normal((n, dim)).astype(np.float32)
        data.flat[:1] = np.float32(-0.0)
        ds = Dataset(data, "float32")
    elif fmt == "bvecs":
        ds = Dataset(rng.integers(0, 256, (n, dim)).astype(np.uint8), "uint8")
    else:
        ds = Dataset(rng.integers(-2**31, 2**31 - 1, (n, dim)).astype(np.int32), "int32")
    p = tmp_path_factory.mktemp("rt") / f"x.{fmt}"
    write_vector_file(ds, p)
    back = read_vector_file(p)
    if n == 0:
        assert back.count == 0
    else:
        assert back == ds
        assert back.data.tobytes() == ds.data.tobytes()


def test_dataset_is_immutable():
    ds = Dataset(np.ones((2, 2), np.float32))
    with pytest.raises(ValueError):
        ds.data[0, 0] = 5
