"""Sparse term-weight vectors and their binary record format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping

import numpy as np


@dataclass(frozen=True, eq=False)
class SparseVec:
    """Sorted term ids with strictly positive weights.

    ``ids`` is an int64 array in strictly increasing order, ``weights`` a
    float64 array of the same length.
    """

    ids: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if ids.ndim != 1 or ids.shape != weights.shape:
            raise ValueError("ids and weights must be 1-d arrays of equal length")
        if ids.size and (np.any(np.diff(ids) <= 0) or ids[0] < 0):
            raise ValueError("term ids must be non-negative and strictly increasing")
        if np.any(~(weights > 0)):
            raise ValueError("weights must be strictly positive and finite")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls) -> SparseVec:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.float64))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> SparseVec:
        # exact zeros only; no epsilon threshold
        dense = np.asarray(dense, dtype=np.float64)
        ids = np.flatnonzero(dense)
        return cls(ids, dense[ids])

    @classmethod
    def from_dict(cls, entries: Mapping[int, float]) -> SparseVec:
        items = sorted((int(t), float(w)) for t, w in entries.items() if w != 0)
        if not items:
            return cls.empty()
        ids, weights = zip(*items)
        return cls(np.array(ids), np.array(weights))

    @property
    def nnz(self) -> int:
        return int(self.ids.size)

    def to_dense(self, size: int) -> np.ndarray:
        if self.ids.size and self.ids[-1] >= size:
            raise ValueError(f"term id {self.ids[-1]} out of range for size {size}")
        out = np.zeros(size)
        out[self.ids] = self.weights
        return out

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.weights.tolist()))

    def scale(self, factor: float) -> SparseVec:
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        return SparseVec(self.ids, self.weights * factor)

    def dot(self, other: SparseVec) -> float:
        common, ia, ib = np.intersect1d(self.ids, other.ids, assume_unique=True, return_indices=True)
        return float(np.dot(self.weights[ia], other.weights[ib]))

    def __eq__(self, other):
        if not isinstance(other, SparseVec):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.weights, other.weights)

    def __len__(self):
        return self.nnz

    def __repr__(self):
        return f"SparseVec({self.to_dict()})"


def top_entries(vec: SparseVec, k: int) -> SparseVec:
    """Keep the ``k`` largest weights; equal weights favour the lower term id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if vec.nnz <= k:
        return vec
    # ids are sorted ascending, so a stable sort on -weight keeps lower ids first
    order = np.argsort(-vec.weights, kind="stable")[:k]
    order.sort()
    return SparseVec(vec.ids[order], vec.weights[order])


# Record layout: u32 id length, utf-8 id, u32 nnz, nnz * (u32 term, f32 weight).

_U32 = struct.Struct("<I")
_PAIR = np.dtype([("term", "<u4"), ("weight", "<f4")])


def write_records(path: str | Path, records: Iterable[tuple[str, SparseVec]]) -> None:
    with open(path, "wb") as fh:
        for rid, vec in records:
            write_record(fh, rid, vec)


def write_record(fh: BinaryIO, rid: str, vec: SparseVec) -> None:
    raw = rid.encode("utf-8")
    fh.write(_U32.pack(len(raw)))
    fh.write(raw)
    fh.write(_U32.pack(vec.nnz))
    pairs = np.empty(vec.nnz, dtype=_PAIR)
    pairs["term"] = vec.ids
    pairs["weight"] = vec.weights
    if vec.nnz and np.any(pairs["weight"] <= 0):
        raise ValueError(f"record {rid!r}: weight underflows to zero in float32")
    fh.write(pairs.tobytes())


def read_records(path: str | Path) -> Iterator[tuple[str, SparseVec]]:
    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        start = pos
        if pos + 4 > len(data):
            raise ValueError(f"truncated record header at offset {pos}")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + n + 4 > len(data):
            raise ValueError(f"truncated record id at offset {pos}")
        rid = data[pos:pos + n].decode("utf-8")
        pos += n
        (nnz,) = _U32.unpack_from(data, pos)
        pos += 4
        end = pos + nnz * _PAIR.itemsize
        if end > len(data):
            raise ValueError(f"truncated record body at offset {pos}")
        pairs = np.frombuffer(data, dtype=_PAIR, count=nnz, offset=pos)
        pos = end
        try:
            vec = SparseVec(pairs["term"].astype(np.int64), pairs["weight"].astype(np.float64))
        except ValueError as exc:
            raise ValueError(f"invalid record at offset {start}: {exc}") from None
        yield rid, vec
