"""Dataset container, distance functions and fvecs/bvecs/ivecs IO.

Distances follow one convention everywhere: smaller is closer.  ``L2`` is the
squared Euclidean distance and ``IP`` is the negated dot product.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numba
import numpy as np

from .errors import FormatError, InvalidArgumentError

ELEM_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}

FORMAT_ELEM = {"fvecs": "float32", "bvecs": "uint8", "ivecs": "int32"}


class Metric(enum.Enum):
    L2 = "l2"
    IP = "ip"

    @classmethod
    def parse(cls, value: "Metric | str") -> "Metric":
        if isinstance(value, Metric):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown metric {value!r}") from None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense row-major vectors; row ``i`` has id ``i``."""

    data: np.ndarray
    elem_type: str = "float32"

    def __post_init__(self):
        if self.elem_type not in ELEM_DTYPES:
            raise InvalidArgumentError(f"unsupported element type {self.elem_type!r}")
        data = np.asarray(self.data)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, 0)
        if data.ndim != 2:
            raise InvalidArgumentError("dataset must be a 2-d matrix")
        data = np.ascontiguousarray(data, dtype=ELEM_DTYPES[self.elem_type])
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Dataset":
        arr = np.asarray(arr)
        for name, dt in ELEM_DTYPES.items():
            if arr.dtype == dt:
                return cls(arr, name)
        return cls(arr.astype(np.float32), "float32")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def itemsize(self) -> int:
        return ELEM_DTYPES[self.elem_type].itemsize

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.elem_type == other.elem_type
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def subset(self, rows) -> "Dataset":
        return Dataset(self.data[rows], self.elem_type)


# --------------------------------------------------------------------------
# distance kernels
#
# Every exact distance in the package goes through these kernels so that the
# searcher, the navigator and the ground-truth oracle produce bit-identical
# values (ties then resolve identically).  Floats accumulate in float64,
# integers in int64.


@numba.njit(cache=True, nogil=True)
def _l2_rows_f(q, X, out):
    m = X.shape[1]
    for i in range(X.shape[0]):
        acc = 0.0
        for j in range(m):
            d = np.float64(X[i, j]) - np.float64(q[j])
            acc += d * d
        out[i] = acc


@numba.njit(cache=True, nogil=True)
def _ip_rows_f(q, X, out):
    m = X.shape[1]
    for i in range(X.shape[0]):
        acc = 0.0
        for j in range(m):
            acc += np.float64(X[i, j]) * np.float64(q[j])
        out[i] = -acc


@numba.njit(cache=True, nogil=True)
def _l2_rows_i(q, X, out):
    m = X.shape[1]
    for i in range(X.shape[0]):
        acc = 0
        for j in range(m):
            d = np.int64(X[i, j]) - np.int64(q[j])
            acc += d * d
        out[i] = acc


@numba.njit(cache=True, nogil=True)
def _ip_rows_i(q, X, out):
    m = X.shape[1]
    for i in range(X.shape[0]):
        acc = 0
        for j in range(m):
            acc += np.int64(X[i, j]) * np.int64(q[j])
        out[i] = -acc


def _is_int(arr: np.ndarray) -> bool:
    return arr.dtype.kind in "iu"


def distances(q, X, metric: Metric | str = Metric.L2) -> np.ndarray:
    """Exact distances from ``q`` to every row of ``X`` as float64."""
    metric = Metric.parse(metric)
    q = np.asarray(q)
    X = np.asarray(X)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if q.ndim != 1 or q.shape[0] != X.shape[1]:
        raise InvalidArgumentError(
            f"dimension mismatch: query has shape {q.shape}, data has dim {X.shape[1]}"
        )
    out = np.empty(X.shape[0], dtype=np.float64)
    if X.shape[0] == 0:
        return out
    if _is_int(q) and _is_int(X):
        kernel = _l2_rows_i if metric is Metric.L2 else _ip_rows_i
        tmp = np.empty(X.shape[0], dtype=np.int64)
        kernel(np.ascontiguousarray(q), np.ascontiguousarray(X), tmp)
        out[:] = tmp
    else:
        kernel = _l2_rows_f if metric is Metric.L2 else _ip_rows_f
        qq = q if q.dtype.kind == "f" else q.astype(np.float64)
        XX = X if X.dtype.kind == "f" else X.astype(np.float32)
        kernel(np.ascontiguousarray(qq), np.ascontiguousarray(XX), out)
    return out


def distance(a, b, metric: Metric | str = Metric.L2) -> float:
    """Distance between two vectors (squared L2 or negated dot product)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.dtype.kind not in "iuf":
        a = a.astype(np.float64)
    if b.dtype.kind not in "iuf":
        b = b.astype(np.float64)
    return float(distances(a, b.reshape(1, -1), metric)[0])


def comparable(d, metric: Metric | str):
    """Map stored distances to the scale the slack thresholds apply to.

    Squared L2 is square-rooted; negated inner products are left as they are.
    """
    if Metric.parse(metric) is Metric.L2:
        return np.sqrt(np.maximum(d, 0.0))
    return d


def within_slack(d, d_first, epsilon: float, metric: Metric | str):
    """``d <= (1 + epsilon) * d_first`` on the comparable scale.

    Written as ``d <= d_first + epsilon * |d_first|`` so the rule stays
    meaningful for negative inner-product distances.
    """
    a = comparable(np.asarray(d, dtype=np.float64), metric)
    if np.isinf(epsilon):
        return np.ones(a.shape, dtype=bool)
    b = comparable(np.asarray(d_first, dtype=np.float64), metric)
    return a <= b + epsilon * np.abs(b)


def pairwise_sq_l2(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Approximate squared L2 matrix via the BLAS expansion (build-time use only)."""
    A = np.asarray(A, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    an = np.einsum("ij,ij->i", A, A)
    bn = np.einsum("ij,ij->i", B, B)
    d = an[:, None] + bn[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def pairwise(A: np.ndarray, B: np.ndarray, metric: Metric | str) -> np.ndarray:
    """BLAS-backed distance matrix; approximate in the last ulps."""
    if Metric.parse(metric) is Metric.L2:
        return pairwise_sq_l2(A, B)
    return -(np.asarray(A, dtype=np.float32) @ np.asarray(B, dtype=np.float32).T)


# --------------------------------------------------------------------------
# file IO


def _check_format(fmt: str) -> str:
    if fmt not in FORMAT_ELEM:
        raise InvalidArgumentError(f"unknown vector file format {fmt!r}")
    return fmt


def read_vector_file(path: str | os.PathLike, fmt: str | None = None) -> Dataset:
    """Read an fvecs/bvecs/ivecs file.  ``fmt`` defaults to the file suffix."""
    path = os.fspath(path)
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    elem = FORMAT_ELEM[_check_format(fmt)]
    dt = ELEM_DTYPES[elem]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return Dataset(np.zeros((0, 0), dtype=dt), elem)
    if raw.size < 4:
        raise FormatError(f"{path}: truncated header", record=0)
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise FormatError(f"{path}: non-positive dimension {dim}", record=0)
    rec = 4 + dim * dt.itemsize
    n, rem = divmod(raw.size, rec)
    # find the first bad header before complaining about length so the error
    # points at the record that broke the layout
    heads = raw[: n * rec].reshape(n, rec)[:, :4].copy().view("<i4").ravel()
    bad = np.flatnonzero(heads != dim)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: record header says dim={int(heads[i])}, expected {dim}", record=i
        )
    if rem:
        raise FormatError(f"{path}: truncated file ({rem} trailing bytes)", record=n)
    body = raw.reshape(n, rec)[:, 4:]
    data = np.ascontiguousarray(body).view(dt).reshape(n, dim)
    return Dataset(data, elem)


def write_vector_file(ds: Dataset, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = os.fspath(path)
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".")
    elem = FORMAT_ELEM[_check_format(fmt)]
    if ds.elem_type != elem:
        raise InvalidArgumentError(
            f"cannot write {ds.elem_type} dataset as {fmt} ({elem} records)"
        )
    n, dim = ds.data.shape
    buf = np.empty((n, 4 + dim * ds.itemsize), dtype=np.uint8)
    if n:
        buf[:, :4] = np.frombuffer(np.int32(dim).astype("<i4").tobytes(), dtype=np.uint8)
        buf[:, 4:] = ds.data.view(np.uint8).reshape(n, -1)
    try:
        with open(path, "wb") as f:
            f.write(buf.tobytes())
    except OSError as e:
        raise OSError(e.errno, f"writing {fmt} file failed: {e.strerror}", path) from e
