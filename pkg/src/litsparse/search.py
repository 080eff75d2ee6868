"""Top-k retrieval: exhaustive scoring, Block-Max Maxscore, and BM25.

Both sparse engines add a document's term contributions in ascending term-id
order, so their scores agree bit for bit. Ties rank the lower doc ordinal
first. Only documents that share at least one term with the query are
returned.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .index import InvertedIndex, TermPostings
from .sparse import SparseVec, top_entries

# Relative slack on upper bounds so float rounding in partial sums can never
# prune a document whose exact score would qualify.
_SLACK = 1e-9


@dataclass
class SearchStats:
    candidates: int = 0
    scored: int = 0
    blocks_skipped: int = 0
    pruned_partial: int = 0


@dataclass
class SearchResult:
    doc_ids: list[str]
    scores: list[float]
    ordinals: list[int]
    stats: SearchStats = field(default_factory=SearchStats)

    def __len__(self):
        return len(self.doc_ids)

    def hits(self) -> list[tuple[str, float]]:
        return list(zip(self.doc_ids, self.scores))


def truncate_query(w: SparseVec, m: int = 16) -> SparseVec:
    """Keep the ``m`` highest-weighted query terms (ties: lower id)."""
    return top_entries(w, m)


def search_exhaustive(idx: InvertedIndex, q: SparseVec, k: int) -> SearchResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.zeros(idx.num_docs)
    matched = np.zeros(idx.num_docs, dtype=bool)
    for term, qw in zip(q.ids.tolist(), q.weights.tolist()):
        tp = idx.postings.get(term)
        if tp is None:
            continue
        scores[tp.docs] += qw * tp.weights
        matched[tp.docs] = True
    cand = np.flatnonzero(matched)
    order = np.lexsort((cand, -scores[cand]))[:k]
    top = cand[order]
    return SearchResult([idx.doc_ids[i] for i in top], scores[top].tolist(), top.tolist(),
                        SearchStats(candidates=int(cand.size), scored=int(cand.size)))


class _Cursor:
    __slots__ = ("term", "qw", "docs", "weights", "pos", "bmax", "blast", "block", "ub")

    def __init__(self, term: int, qw: float, tp: TermPostings, end: int):
        self.term = term
        self.qw = qw
        # lists end in a sentinel so docs[pos] is always valid
        self.docs, self.weights, self.bmax, self.blast = tp.as_lists(end)
        self.pos = 0
        self.block = 0
        self.ub = qw * tp.max_weight

    def seek(self, target: int) -> int:
        if self.docs[self.pos] < target:
            self.pos = bisect_left(self.docs, target, self.pos)
        return self.docs[self.pos]

    def block_max(self, target: int) -> float:
        """Weighted max of the block that would hold ``target``."""
        if self.blast[self.block] < target:
            self.block = bisect_left(self.blast, target, self.block)
        return self.qw * self.bmax[self.block]


def search_bmm(idx: InvertedIndex, q: SparseVec, k: int) -> SearchResult:
    """Safe document-at-a-time top-k with Maxscore term partitioning and
    block-max pruning of non-essential terms.

    Returns exactly what :func:`search_exhaustive` returns.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    end = idx.num_docs
    cursors = [_Cursor(t, qw, idx.postings[t], end)
               for t, qw in zip(q.ids.tolist(), q.weights.tolist()) if t in idx.postings]
    stats = SearchStats()
    if not cursors:
        return SearchResult([], [], [], stats)
    # ascending upper bound; a prefix whose bounds sum to <= theta is non-essential
    cursors.sort(key=lambda c: (c.ub, c.term))
    prefix = []
    acc = 0.0
    for c in cursors:
        acc += c.ub
        prefix.append(acc * (1 + _SLACK))

    heap: list[tuple[float, int]] = []  # (score, -ordinal); heap[0] is the k-th best
    theta = -math.inf
    n_ness = 0
    essential = cursors
    full = False

    while True:
        cand = end
        for c in essential:
            d = c.docs[c.pos]
            if d < cand:
                cand = d
        if cand >= end:
            break
        stats.candidates += 1

        contribs: list[tuple[int, float]] = []
        partial = 0.0
        for c in essential:
            if c.docs[c.pos] == cand:
                x = c.qw * c.weights[c.pos]
                contribs.append((c.term, x))
                partial += x
                c.pos += 1

        if n_ness:
            # theta is finite here: non-essential terms only exist once the heap is full
            if partial * (1 + _SLACK) + prefix[n_ness - 1] <= theta:
                stats.pruned_partial += 1
                continue
            bound = partial
            for i in range(n_ness):
                bound += cursors[i].block_max(cand)
            if bound * (1 + _SLACK) <= theta:
                stats.blocks_skipped += 1
                continue
            pruned = False
            for i in range(n_ness - 1, -1, -1):
                if partial * (1 + _SLACK) + prefix[i] <= theta:
                    pruned = True
                    break
                c = cursors[i]
                if c.seek(cand) == cand:
                    x = c.qw * c.weights[c.pos]
                    contribs.append((c.term, x))
                    partial += x
            if pruned:
                stats.pruned_partial += 1
                continue

        contribs.sort()
        score = 0.0
        for _, x in contribs:
            score += x
        stats.scored += 1
        entry = (score, -cand)
        if not full:
            heapq.heappush(heap, entry)
            full = len(heap) == k
            if not full:
                continue
        elif entry > heap[0]:
            heapq.heapreplace(heap, entry)
        else:
            continue
        if heap[0][0] > theta:
            theta = heap[0][0]
            while n_ness < len(cursors) and prefix[n_ness] <= theta:
                n_ness += 1
            essential = cursors[n_ness:]

    ranked = sorted(heap, key=lambda e: (-e[0], -e[1]))
    ords = [-o for _, o in ranked]
    return SearchResult([idx.doc_ids[o] for o in ords], [s for s, _ in ranked], ords, stats)


# ---------------------------------------------------------------------------
# BM25

@dataclass
class Bm25Stats:
    doc_ids: list[str]
    doc_len: np.ndarray
    avgdl: float
    df: dict[int, int]
    postings: dict[int, tuple[np.ndarray, np.ndarray]]  # term -> (ordinals, tf)
    k1: float = 1.2
    b: float = 0.75
    delta: float = 0.25

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: int) -> float:
        df = self.df.get(term, 0)
        return math.log((self.num_docs - df + 0.5) / (df + 0.5) + 1.0)

    def save(self, path: str | Path) -> None:
        terms = np.array(sorted(self.postings), dtype=np.int64)
        lens = np.array([self.postings[t][0].size for t in terms], dtype=np.int64)
        ords = np.concatenate([self.postings[t][0] for t in terms]) if terms.size else np.zeros(0, np.int64)
        tfs = np.concatenate([self.postings[t][1] for t in terms]) if terms.size else np.zeros(0, np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, doc_ids=np.array(self.doc_ids, dtype=object).astype(str), doc_len=self.doc_len,
                     terms=terms, lens=lens, ords=ords, tfs=tfs, params=np.array([self.k1, self.b, self.delta]))

    @classmethod
    def load(cls, path: str | Path) -> Bm25Stats:
        with np.load(path, allow_pickle=False) as z:
            doc_ids = [str(x) for x in z["doc_ids"]]
            doc_len = z["doc_len"]
            terms, lens, ords, tfs = z["terms"], z["lens"], z["ords"], z["tfs"]
            k1, b, delta = z["params"].tolist()
        postings = {}
        starts = np.concatenate(([0], np.cumsum(lens)))
        for t, lo, hi in zip(terms.tolist(), starts[:-1], starts[1:]):
            postings[t] = (ords[lo:hi], tfs[lo:hi])
        avgdl = float(doc_len.mean()) if doc_len.size else 0.0
        return cls(doc_ids, doc_len, avgdl, {t: int(p[0].size) for t, p in postings.items()}, postings, k1, b, delta)


def build_bm25(docs: Iterable[tuple[str, Sequence[int]]], k1: float = 1.2, b: float = 0.75,
               delta: float = 0.25) -> Bm25Stats:
    """Collect BM25 statistics from tokenized documents. Unknown id 0 is not indexed."""
    doc_ids, lengths = [], []
    buckets: dict[int, list[tuple[int, int]]] = {}
    for ordinal, (doc_id, tokens) in enumerate(docs):
        doc_ids.append(doc_id)
        lengths.append(len(tokens))
        for term, tf in sorted(Counter(t for t in tokens if t != 0).items()):
            buckets.setdefault(term, []).append((ordinal, tf))
    if len(set(doc_ids)) != len(doc_ids):
        raise ValueError("duplicate doc ids")
    postings = {t: (np.array([o for o, _ in v], np.int64), np.array([f for _, f in v], np.int64))
                for t, v in buckets.items()}
    doc_len = np.array(lengths, dtype=np.int64)
    avgdl = float(doc_len.mean()) if doc_len.size else 0.0
    return Bm25Stats(doc_ids, doc_len, avgdl, {t: int(p[0].size) for t, p in postings.items()},
                     postings, k1, b, delta)


def _bm25_term(stats: Bm25Stats, idf: float, tf, dl):
    norm = stats.k1 * (1.0 - stats.b + stats.b * dl / stats.avgdl)
    return idf * (tf * (stats.k1 + 1.0) / (tf + norm) + stats.delta)


def bm25_score(stats: Bm25Stats, query: Sequence[int], doc: Sequence[int]) -> float:
    """Lower-bounded BM25: each distinct query term present in ``doc`` adds
    ``idf * (tf (k1 + 1) / (tf + k1 (1 - b + b dl / avgdl)) + delta)``."""
    tf = Counter(doc)
    dl = len(doc)
    score = 0.0
    for term in sorted(set(query)):
        if term == 0 or tf[term] == 0:
            continue
        score += _bm25_term(stats, stats.idf(term), tf[term], dl)
    return score


def search_bm25(stats: Bm25Stats, query: Sequence[int], k: int) -> SearchResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.zeros(stats.num_docs)
    matched = np.zeros(stats.num_docs, dtype=bool)
    for term in sorted(set(query)):
        if term == 0 or term not in stats.postings:
            continue
        ords, tfs = stats.postings[term]
        scores[ords] += _bm25_term(stats, stats.idf(term), tfs, stats.doc_len[ords])
        matched[ords] = True
    cand = np.flatnonzero(matched)
    top = cand[np.lexsort((cand, -scores[cand]))[:k]]
    return SearchResult([stats.doc_ids[i] for i in top], scores[top].tolist(), top.tolist(),
                        SearchStats(candidates=int(cand.size), scored=int(cand.size)))


# ---------------------------------------------------------------------------
# run files: query_id \t doc_id \t rank \t score

def write_run(path: str | Path, runs: Mapping[str, Sequence[tuple[str, float]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, hits in runs.items():
            for rank, (doc_id, score) in enumerate(hits, 1):
                fh.write(f"{qid}\t{doc_id}\t{rank}\t{score!r}\n")


def read_run(path: str | Path) -> dict[str, list[str]]:
    """Ranked doc ids per query, ordered by the rank column."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ValueError(f"run line {lineno}: expected 4 columns, got {len(cols)}")
            try:
                rank = int(cols[2])
                float(cols[3])
            except ValueError:
                raise ValueError(f"run line {lineno}: bad rank or score") from None
            rows.setdefault(cols[0], []).append((rank, cols[1]))
    return {q: [d for _, d in sorted(v)] for q, v in rows.items()}
