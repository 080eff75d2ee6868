"""Retrieval quality and cost metrics over run files and qrels."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .sparse import SparseVec

Run = Mapping[str, Sequence[str]]      # query id -> ranked doc ids
Qrels = Mapping[str, set[str]]         # query id -> relevant doc ids


def read_qrels(path: str | Path) -> dict[str, set[str]]:
    qrels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise ValueError(f"qrels line {lineno}: expected 'query_id<TAB>doc_id'")
            qrels.setdefault(cols[0], set()).add(cols[1])
    if not qrels:
        raise ValueError("empty qrels")
    return qrels


def write_qrels(path: str | Path, qrels: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, docs in qrels.items():
            for d in sorted(docs):
                fh.write(f"{qid}\t{d}\n")


def _check(run: Run, qrels: Qrels) -> None:
    missing = [q for q in run if q not in qrels]
    if missing:
        raise ValueError(f"query {missing[0]!r} in run has no relevance judgments")
    if not qrels:
        raise ValueError("empty qrels")


def hit_at_k(run: Run, qrels: Qrels, k: int) -> float:
    """Fraction of judged queries with a relevant doc in the top ``k``.

    Unjudged-in-run queries count as misses.
    """
    _check(run, qrels)
    if any(len(rel) > 1 for rel in qrels.values()):
        warnings.warn("hit@k with several relevant docs per query counts any relevant hit", stacklevel=2)
    hits = sum(1 for q, rel in qrels.items() if any(d in rel for d in run.get(q, ())[:k]))
    return hits / len(qrels)


def mrr_at_10(run: Run, qrels: Qrels) -> float:
    _check(run, qrels)
    total = 0.0
    for q, rel in qrels.items():
        for rank, d in enumerate(run.get(q, ())[:10], 1):
            if d in rel:
                total += 1.0 / rank
                break
    return total / len(qrels)


def recall_at_k(run: Run, qrels: Qrels, k: int) -> float:
    _check(run, qrels)
    total = 0.0
    for q, rel in qrels.items():
        top = set(run.get(q, ())[:k])
        total += len(top & rel) / len(rel)
    return total / len(qrels)


def flops_overlap(query_vecs: Sequence[SparseVec], item_vecs: Sequence[SparseVec],
                  max_pairs: int = 10_000, seed: int = 0) -> float:
    """Mean support overlap of (query, item) pairs; all pairs when there are
    at most ``max_pairs`` of them, otherwise a seeded sample."""
    nq, nd = len(query_vecs), len(item_vecs)
    if nq == 0 or nd == 0:
        raise ValueError("flops_overlap needs at least one query and one item")
    if nq * nd <= max_pairs:
        qi, di = np.divmod(np.arange(nq * nd), nd)
    else:
        rng = np.random.default_rng(seed)
        qi = rng.integers(0, nq, size=max_pairs)
        di = rng.integers(0, nd, size=max_pairs)
    total = 0
    for a, b in zip(qi.tolist(), di.tolist()):
        total += np.intersect1d(query_vecs[a].ids, item_vecs[b].ids, assume_unique=True).size
    return total / len(qi)


def mask_terms(vec: SparseVec, literal, keep: str) -> SparseVec:
    """``literal_only`` keeps dims in ``literal``; ``expansion_only`` the rest."""
    if keep not in ("literal_only", "expansion_only"):
        raise ValueError(f"unknown keep mode {keep!r}")
    inside = np.isin(vec.ids, np.asarray(list(literal), dtype=np.int64))
    sel = inside if keep == "literal_only" else ~inside
    return SparseVec(vec.ids[sel], vec.weights[sel])


@dataclass
class MetricsReport:
    hit: dict[int, float] = field(default_factory=dict)
    mrr_at_10: float | None = None
    recall: dict[int, float] = field(default_factory=dict)
    flops_overlap: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {f"hit@{k}": v for k, v in self.hit.items()}
        if self.mrr_at_10 is not None:
            out["mrr@10"] = self.mrr_at_10
        out.update({f"recall@{k}": v for k, v in self.recall.items()})
        if self.flops_overlap is not None:
            out["flops_overlap"] = self.flops_overlap
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False)

    def to_table(self) -> str:
        rows = self.as_dict()
        width = max((len(k) for k in rows), default=6)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        lines += [f"{k:<{width}}  {v:.4f}" for k, v in rows.items()]
        return "\n".join(lines)


ALL_METRICS = ("hit@1", "hit@10", "hit@100", "hit@1000", "mrr@10", "recall@10", "recall@100", "recall@1000")


def evaluate(run: Run, qrels: Qrels, metrics: Sequence[str] = ALL_METRICS) -> MetricsReport:
    report = MetricsReport()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in metrics:
            if name == "mrr@10":
                report.mrr_at_10 = mrr_at_10(run, qrels)
                continue
            kind, _, k = name.partition("@")
            if kind not in ("hit", "recall") or not k.isdigit() or int(k) < 1:
                raise ValueError(f"unknown metric {name!r}")
            fn = hit_at_k if kind == "hit" else recall_at_k
            getattr(report, kind)[int(k)] = fn(run, qrels, int(k))
    return report
