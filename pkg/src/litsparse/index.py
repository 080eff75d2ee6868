"""Block-partitioned inverted index over sparse item vectors.

Each term's postings are stored in doc-ordinal order and cut into blocks of
``block_size``; every block records the maximum stored weight so a searcher
can bound a block's contribution without decoding it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .sparse import SparseVec

MAGIC = b"PRIX"
FORMAT_VERSION = 1
QMAX = 65535


@dataclass(frozen=True)
class Quantization:
    kind: str = "none"  # "none" | "fixed16"
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "fixed16"):
            raise ValueError(f"unknown quantization {self.kind!r}")

    def encode(self, weights: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return weights.astype(np.float32)
        if self.scale <= 0:
            return np.zeros(weights.shape, np.uint16)
        return np.clip(np.rint(weights / self.scale), 0, QMAX).astype(np.uint16)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return codes.astype(np.float64)
        return codes.astype(np.float64) * self.scale


@dataclass
class TermPostings:
    docs: np.ndarray       # int64, strictly increasing ordinals
    codes: np.ndarray      # stored representation (float32 or uint16)
    weights: np.ndarray    # float64 values the searcher scores with
    block_max: np.ndarray  # float64, one per block
    block_last: np.ndarray # int64, last ordinal of each block
    block_size: int
    _lists: tuple | None = field(default=None, repr=False, compare=False)

    def as_lists(self, end: int) -> tuple[list, list, list, list]:
        """Python-list views (docs, weights, block maxima, block lasts), each
        with a trailing sentinel; cached because searchers re-read them per query."""
        if self._lists is None or self._lists[0][-1] != end:
            self._lists = (self.docs.tolist() + [end], self.weights.tolist() + [0.0],
                           self.block_max.tolist() + [0.0], self.block_last.tolist() + [end])
        return self._lists

    @property
    def max_weight(self) -> float:
        return float(self.block_max.max()) if self.block_max.size else 0.0

    def __len__(self):
        return int(self.docs.size)


@dataclass
class InvertedIndex:
    doc_ids: list[str]
    postings: dict[int, TermPostings]
    block_size: int = 64
    quantization: Quantization = field(default_factory=Quantization)

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    def term_max(self, term: int) -> float:
        tp = self.postings.get(term)
        return tp.max_weight if tp is not None else 0.0

    def num_postings(self) -> int:
        return sum(len(tp) for tp in self.postings.values())

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        if (self.doc_ids != other.doc_ids or self.block_size != other.block_size
                or self.quantization != other.quantization or self.postings.keys() != other.postings.keys()):
            return False
        for t, a in self.postings.items():
            b = other.postings[t]
            for name in ("docs", "codes", "weights", "block_max", "block_last"):
                x, y = getattr(a, name), getattr(b, name)
                if x.dtype != y.dtype or not np.array_equal(x, y):
                    return False
        return True


def _make_postings(docs: np.ndarray, codes: np.ndarray, quant: Quantization, block_size: int) -> TermPostings:
    weights = quant.decode(codes)
    starts = np.arange(0, docs.size, block_size)
    block_max = np.maximum.reduceat(weights, starts) if docs.size else np.zeros(0)
    block_last = docs[np.minimum(starts + block_size, docs.size) - 1]
    return TermPostings(docs, codes, weights, block_max, block_last, block_size)


def build(vectors: Iterable[tuple[str, SparseVec]], block_size: int = 64,
          quantization: str = "none") -> InvertedIndex:
    """Index ``(doc_id, vector)`` pairs; ordinals follow input order.

    With ``quantization="fixed16"`` weights become ``round(w / scale)`` codes
    with one global ``scale = max weight / 65535``, and block maxima are taken
    over the dequantized values so pruning bounds hold for what is scored.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    doc_ids: list[str] = []
    seen: set[str] = set()
    term_chunks: list[np.ndarray] = []
    doc_chunks: list[np.ndarray] = []
    weight_chunks: list[np.ndarray] = []
    for doc_id, vec in vectors:
        if doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        if np.any(vec.weights <= 0):
            raise ValueError(f"doc {doc_id!r} has a non-positive weight")
        seen.add(doc_id)
        ordinal = len(doc_ids)
        doc_ids.append(doc_id)
        term_chunks.append(vec.ids)
        doc_chunks.append(np.full(vec.nnz, ordinal, dtype=np.int64))
        weight_chunks.append(vec.weights)

    if quantization == "none":
        quant = Quantization()
    elif quantization == "fixed16":
        top = max((float(w.max()) for w in weight_chunks if w.size), default=0.0)
        quant = Quantization("fixed16", top / QMAX)
    else:
        raise ValueError(f"unknown quantization {quantization!r}")

    postings: dict[int, TermPostings] = {}
    if term_chunks:
        terms = np.concatenate(term_chunks)
        docs = np.concatenate(doc_chunks)
        weights = np.concatenate(weight_chunks)
        if terms.size:
            if quant.kind == "none" and np.any(weights.astype(np.float32) <= 0):
                raise ValueError("weight underflows to zero in float32")
            order = np.lexsort((docs, terms))
            terms, docs, weights = terms[order], docs[order], weights[order]
            cuts = np.flatnonzero(np.diff(terms)) + 1
            bounds = np.concatenate(([0], cuts, [terms.size]))
            codes = quant.encode(weights)
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                postings[int(terms[lo])] = _make_postings(docs[lo:hi], codes[lo:hi], quant, block_size)
    return InvertedIndex(doc_ids, postings, block_size, quant)


# File layout (little-endian):
#   magic "PRIX", u32 version, u32 num_docs, num_docs * (u32 len, utf-8 id),
#   u8 quant kind (0 none, 1 fixed16), f64 scale, u32 block_size, u32 num_terms,
#   per term: u32 term_id, u32 num_blocks, then per block:
#     u32 count, f64 max_weight, count * u32 doc-ordinal deltas, count weights
#     (f32 for none, u16 codes for fixed16).
# The first delta of a term is taken from -1, later ones from the previous doc.

_QUANT_KINDS = {"none": 0, "fixed16": 1}


def save(idx: InvertedIndex, path: str | Path) -> None:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, idx.num_docs)]
    for d in idx.doc_ids:
        raw = d.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    out.append(struct.pack("<BdII", _QUANT_KINDS[idx.quantization.kind], idx.quantization.scale,
                           idx.block_size, len(idx.postings)))
    wdtype = "<f4" if idx.quantization.kind == "none" else "<u2"
    for term in sorted(idx.postings):
        tp = idx.postings[term]
        nblocks = tp.block_max.size
        out.append(struct.pack("<II", term, nblocks))
        deltas = np.diff(tp.docs, prepend=-1).astype("<u4")
        for b in range(nblocks):
            lo, hi = b * tp.block_size, min((b + 1) * tp.block_size, tp.docs.size)
            out.append(struct.pack("<Id", hi - lo, tp.block_max[b]))
            out.append(deltas[lo:hi].tobytes())
            out.append(tp.codes[lo:hi].astype(wdtype).tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError(f"index file truncated at offset {self.pos} while reading {what}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise ValueError(f"index file truncated at offset {self.pos} while reading {what}")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr


def load(path: str | Path) -> InvertedIndex:
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < 4 or r.data[:4] != MAGIC:
        raise ValueError("bad magic at offset 0")
    r.pos = 4
    (version,) = r.take("<I", "version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version} at offset 4")
    (num_docs,) = r.take("<I", "num_docs")
    doc_ids = []
    for _ in range(num_docs):
        (n,) = r.take("<I", "doc id length")
        start = r.pos
        raw = r.array("u1", n, "doc id").tobytes()
        try:
            doc_ids.append(raw.decode("utf-8"))
        except UnicodeDecodeError:
            raise ValueError(f"invalid utf-8 doc id at offset {start}") from None
    if len(set(doc_ids)) != len(doc_ids):
        raise ValueError("duplicate doc ids in doc table")
    kind_pos = r.pos
    kind, scale, block_size, num_terms = r.take("<BdII", "quantization descriptor")
    kinds = {v: k for k, v in _QUANT_KINDS.items()}
    if kind not in kinds:
        raise ValueError(f"unknown quantization kind {kind} at offset {kind_pos}")
    if block_size < 1:
        raise ValueError(f"invalid block size at offset {kind_pos + 9}")
    quant = Quantization(kinds[kind], scale)
    wdtype = "<f4" if quant.kind == "none" else "<u2"
    postings: dict[int, TermPostings] = {}
    prev_term = -1
    for _ in range(num_terms):
        term_pos = r.pos
        term, nblocks = r.take("<II", "term header")
        if term <= prev_term:
            raise ValueError(f"term ids out of order at offset {term_pos}")
        prev_term = term
        docs_parts, code_parts, maxes = [], [], []
        prev_doc = -1
        for b in range(nblocks):
            block_pos = r.pos
            count, bmax = r.take("<Id", "block header")
            if count < 1 or count > block_size or (b < nblocks - 1 and count != block_size):
                raise ValueError(f"invalid block count {count} at offset {block_pos}")
            deltas = r.array("<u4", count, "doc deltas").astype(np.int64)
            if np.any(deltas < 1):
                raise ValueError(f"non-increasing doc ordinals in block at offset {block_pos}")
            docs = prev_doc + np.cumsum(deltas)
            if docs[-1] >= num_docs:
                raise ValueError(f"doc ordinal out of range in block at offset {block_pos}")
            prev_doc = int(docs[-1])
            docs_parts.append(docs)
            code_parts.append(r.array(wdtype, count, "weights").astype(wdtype[1:]))
            maxes.append((bmax, block_pos))
        if nblocks == 0:
            raise ValueError(f"term {term} has no blocks at offset {term_pos}")
        tp = _make_postings(np.concatenate(docs_parts), np.concatenate(code_parts), quant, block_size)
        for b, (bmax, block_pos) in enumerate(maxes):
            if tp.block_max[b] != bmax:
                raise ValueError(f"block max mismatch at offset {block_pos}")
        if quant.kind == "none" and np.any(tp.weights <= 0):
            raise ValueError(f"non-positive weight in term {term} at offset {term_pos}")
        postings[term] = tp
    if r.pos != len(r.data):
        raise ValueError(f"trailing bytes at offset {r.pos}")
    return InvertedIndex(doc_ids, postings, block_size, quant)
