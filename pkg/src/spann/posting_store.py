"""On-disk posting lists.

``postings.bin`` layout (little-endian)::

    header  128 bytes   magic, version, N, dim, elem, limit, page size,
                        table offset, payload offset, table crc32
    table    N x 24     offset u64, length u64, crc32 u32, count u32
    payload             per list: count x [int32 id][vector bytes], ids
                        ascending; each list starts on a page boundary

The file is padded to a whole number of pages so every list read is a run
of full pages.
"""

from __future__ import annotations

import math
import mmap
import os
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .clustering import entry_bytes
from .errors import CorruptionError, FormatError, InternalError, InvalidArgumentError
from .vectors import ELEM_DTYPES, Dataset

POSTINGS_FILE = "postings.bin"
NAVIGATOR_FILE = "navigator"
META_FILE = "meta"

POST_MAGIC = b"SPNPOST\0"
POST_VERSION = 1
DEFAULT_PAGE_SIZE = 4096
_HEADER = struct.Struct("<8sIIQIIQIIQQI")
_HEADER_SIZE = 128
_TABLE_DTYPE = np.dtype([("offset", "<u8"), ("length", "<u8"), ("crc", "<u4"), ("count", "<u4")])
_ELEM_CODES = {"float32": 0, "uint8": 1}

META_HEADER = "spann-meta"
META_VERSION = 1


@dataclass
class PostingReadStats:
    lists_read: int = 0
    bytes_read: int = 0
    read_calls: int = 0
    pages_read: int = 0

    def __add__(self, other: "PostingReadStats") -> "PostingReadStats":
        return PostingReadStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __iadd__(self, other: "PostingReadStats") -> "PostingReadStats":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self


def _pages(nbytes: int, page_size: int) -> int:
    return -(-nbytes // page_size)


def write_posting_file(members: list[np.ndarray], X: Dataset, path, posting_limit_bytes: int,
                       page_size: int = DEFAULT_PAGE_SIZE, align: bool = True) -> None:
    """Write ``postings.bin`` for lists given as arrays of vector ids.

    Raises :class:`InternalError` when a list is larger than the limit; the
    partitioner is responsible for respecting it.
    """
    eb = entry_bytes(X.dim, X.itemsize)
    N = len(members)
    table = np.zeros(N, dtype=_TABLE_DTYPE)
    table_off = _HEADER_SIZE
    payload_off = table_off + N * _TABLE_DTYPE.itemsize
    if align:
        payload_off = _pages(payload_off, page_size) * page_size
    entry_dt = np.dtype([("id", "<i4"), ("vec", ELEM_DTYPES[X.elem_type], (X.dim,))])
    chunks: list[bytes] = []
    pos = payload_off
    for i, ids in enumerate(members):
        ids = np.sort(np.asarray(ids, dtype=np.int64))
        length = len(ids) * eb
        if length > posting_limit_bytes:
            raise InternalError(
                f"posting list {i} holds {length} bytes, above the {posting_limit_bytes}-byte limit"
            )
        rec = np.empty(len(ids), dtype=entry_dt)
        rec["id"] = ids
        rec["vec"] = X.data[ids]
        blob = rec.tobytes()
        if align and pos % page_size:
            pad = page_size - pos % page_size
            chunks.append(b"\0" * pad)
            pos += pad
        table[i] = (pos if length else 0, length, zlib.crc32(blob), len(ids))
        chunks.append(blob)
        pos += length
    tail = (-pos) % page_size
    table_bytes = table.tobytes()
    header = _HEADER.pack(POST_MAGIC, POST_VERSION, 0, N, X.dim, _ELEM_CODES[X.elem_type],
                          posting_limit_bytes, page_size, 1 if align else 0, table_off,
                          payload_off, zlib.crc32(table_bytes))
    try:
        with open(path, "wb") as f:
            f.write(header.ljust(_HEADER_SIZE, b"\0"))
            f.write(table_bytes)
            f.write(b"\0" * (payload_off - table_off - len(table_bytes)))
            for c in chunks:
                f.write(c)
            f.write(b"\0" * tail)
    except OSError as e:
        raise OSError(e.errno, f"writing postings failed: {e.strerror}", os.fspath(path)) from e


class PostingReader:
    """Positioned, page-granular reads of posting lists.

    The offsets table lives in memory; payload reads go through ``os.pread``
    so one reader can serve concurrent threads.  ``direct=True`` asks for
    ``O_DIRECT`` where the platform supports it.
    """

    def __init__(self, path, direct: bool = False):
        self.path = os.fspath(path)
        flags = os.O_RDONLY
        self.direct = False
        if direct and hasattr(os, "O_DIRECT"):
            try:
                self._fd = os.open(self.path, flags | os.O_DIRECT)
                self.direct = True
            except OSError:
                self._fd = os.open(self.path, flags)
        else:
            self._fd = os.open(self.path, flags)
        self.page_size = DEFAULT_PAGE_SIZE
        head = self._pread(0, _HEADER_SIZE)
        if len(head) < _HEADER.size:
            raise FormatError(f"{self.path}: truncated postings header")
        (magic, ver, _flags, N, dim, elem, limit, page, aligned, table_off, payload_off,
         table_crc) = _HEADER.unpack_from(head)
        if magic != POST_MAGIC:
            raise FormatError(f"{self.path}: bad postings magic {magic!r}")
        if ver != POST_VERSION:
            raise FormatError(f"{self.path}: unsupported postings version {ver}")
        self.num_lists = N
        self.dim = dim
        self.elem_type = {v: k for k, v in _ELEM_CODES.items()}[elem]
        self.posting_limit_bytes = limit
        self.page_size = page
        self.aligned = bool(aligned)
        raw = self._pread(table_off, N * _TABLE_DTYPE.itemsize)
        if zlib.crc32(raw) != table_crc:
            raise CorruptionError(f"{self.path}: offsets table checksum mismatch")
        self.table = np.frombuffer(raw, dtype=_TABLE_DTYPE).copy()
        self.file_size = os.fstat(self._fd).st_size
        end = self.table["offset"] + self.table["length"]
        if N and end.max() > self.file_size:
            raise FormatError(f"{self.path}: offsets table points past end of file")
        self._entry_dt = np.dtype([("id", "<i4"), ("vec", ELEM_DTYPES[self.elem_type], (dim,))])

    def _read_direct(self, start: int, nbytes: int) -> bytes:
        buf = mmap.mmap(-1, max(nbytes, 1))
        n = os.preadv(self._fd, [buf], start)
        return bytes(buf[:n])

    def _pread(self, start: int, nbytes: int) -> bytes:
        if self.direct:
            a = (start // self.page_size) * self.page_size
            b = _pages(start + nbytes, self.page_size) * self.page_size
            data = self._read_direct(a, b - a)
            return data[start - a:start - a + nbytes]
        return os.pread(self._fd, nbytes, start)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    @property
    def itemsize(self) -> int:
        return ELEM_DTYPES[self.elem_type].itemsize

    def list_length(self, list_id: int) -> int:
        return int(self.table["length"][list_id])

    def read(self, list_id: int) -> tuple[np.ndarray, np.ndarray, PostingReadStats]:
        """Return ``(ids, vectors, stats)`` for one list."""
        if not 0 <= list_id < self.num_lists:
            raise InvalidArgumentError(f"list id {list_id} out of range [0, {self.num_lists})")
        off, length, crc, count = self.table[list_id]
        off, length, count = int(off), int(length), int(count)
        stats = PostingReadStats(lists_read=1)
        if length == 0:
            return (np.empty(0, dtype=np.int64),
                    np.empty((0, self.dim), dtype=ELEM_DTYPES[self.elem_type]), stats)
        ps = self.page_size
        a = (off // ps) * ps
        b = _pages(off + length, ps) * ps
        if self.direct:
            page_bytes = self._read_direct(a, b - a)
        else:
            page_bytes = os.pread(self._fd, b - a, a)
        stats.read_calls = 1
        stats.pages_read = (b - a) // ps
        stats.bytes_read = b - a
        blob = page_bytes[off - a:off - a + length]
        if len(blob) != length:
            raise FormatError(f"{self.path}: short read on list {list_id}")
        if zlib.crc32(blob) != int(crc):
            raise CorruptionError(f"{self.path}: checksum mismatch in posting list {list_id}")
        rec = np.frombuffer(blob, dtype=self._entry_dt, count=count)
        return rec["id"].astype(np.int64), rec["vec"], stats

    def read_many(self, list_ids) -> tuple[np.ndarray, np.ndarray, PostingReadStats]:
        """Concatenated entries of several lists (input order, duplicates kept)."""
        ids, vecs, total = [], [], PostingReadStats()
        for lid in list_ids:
            i, v, s = self.read(int(lid))
            ids.append(i)
            vecs.append(v)
            total += s
        if not ids:
            return (np.empty(0, dtype=np.int64),
                    np.empty((0, self.dim), dtype=ELEM_DTYPES[self.elem_type]), total)
        return np.concatenate(ids), np.concatenate(vecs), total


def write_postings(assignment, X: Dataset, index_dir, posting_limit_bytes: int,
                   navigator=None, table=None, meta: dict | None = None,
                   page_size: int = DEFAULT_PAGE_SIZE, align: bool = True) -> None:
    """Write an index directory: ``postings.bin``, ``navigator`` and ``meta``.

    Without an explicit navigator an exhaustive-scan one is stored.
    """
    from .navigator import CentroidTable, build_navigator, save_navigator

    os.makedirs(index_dir, exist_ok=True)
    post_path = os.path.join(index_dir, POSTINGS_FILE)
    nav_path = os.path.join(index_dir, NAVIGATOR_FILE)
    write_posting_file(assignment.members(), X, post_path, posting_limit_bytes, page_size, align)
    if table is None:
        table = CentroidTable.from_assignment(assignment, X.data)
    if navigator is None:
        navigator = build_navigator(table, "exact")
    save_navigator(nav_path, navigator, table)
    values = dict(meta or {})
    values.update(
        count=X.count,
        dim=X.dim,
        elem_type=X.elem_type,
        num_lists=assignment.num_lists,
        posting_limit_bytes=posting_limit_bytes,
        page_size=page_size,
        navigator=navigator.strategy.value,
        metric=navigator.metric.value,
        postings_crc32=file_crc32(post_path),
        navigator_crc32=file_crc32(nav_path),
    )
    write_meta(os.path.join(index_dir, META_FILE), values)


def read_posting(reader: PostingReader, list_id: int):
    """Entries of ``list_id`` as ``[(id, vector), ...]`` plus the read stats."""
    ids, vecs, stats = reader.read(list_id)
    return [(int(i), v) for i, v in zip(ids, vecs)], stats


def max_pages_per_list(posting_limit_bytes: int, page_size: int = DEFAULT_PAGE_SIZE) -> int:
    return math.ceil(posting_limit_bytes / page_size)


# --------------------------------------------------------------------------
# meta file


def write_meta(path, values: dict) -> None:
    lines = [f"{META_HEADER} {META_VERSION}"]
    for key in sorted(values):
        val = values[key]
        if isinstance(val, float):
            val = repr(val)
        lines.append(f"{key}={val}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(META_HEADER + " "):
        raise FormatError(f"{path}: not a meta file")
    ver = lines[0].split()[1]
    if ver != str(META_VERSION):
        raise FormatError(f"{path}: unsupported meta version {ver}")
    out = {}
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def file_crc32(path) -> int:
    crc = 0
    with open(path, "rb") as f:
        while chunk := f.read(1 << 20):
            crc = zlib.crc32(chunk, crc)
    return crc
