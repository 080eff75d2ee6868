"""
Safe pruning with Block-Max Maxscore
====================================

Search over an inverted index skips postings whose block maxima prove they
cannot enter the top k. The pruned search returns exactly what scoring
every document would.
"""

import time

import numpy as np

from litsparse.index import build
from litsparse.search import search_bmm, search_exhaustive
from litsparse.sparse import SparseVec

rng = np.random.default_rng(0)


def random_vec(nnz):
    ids = np.unique(np.minimum(rng.zipf(1.3, size=nnz), 3000) - 1)
    return SparseVec(ids, rng.gamma(1.5, 1.0, size=ids.size) + 1e-3)


docs = [(f"d{i}", random_vec(int(rng.integers(5, 40)))) for i in range(5000)]
queries = [random_vec(int(rng.integers(2, 17))) for _ in range(200)]

for quantization in ("none", "fixed16"):
    idx = build(docs, block_size=64, quantization=quantization)
    t0 = time.perf_counter()
    pruned = [search_bmm(idx, q, 10) for q in queries]
    t1 = time.perf_counter()
    full = [search_exhaustive(idx, q, 10) for q in queries]
    same = all(a.doc_ids == b.doc_ids and a.scores == b.scores for a, b in zip(pruned, full))
    scored = sum(r.stats.scored for r in pruned) / len(queries)
    skipped = sum(r.stats.blocks_skipped for r in pruned) / len(queries)
    print(f"{quantization:8s} identical={same}  docs fully scored/query={scored:.0f}  "
          f"block skips/query={skipped:.0f}  pruned search {1000 * (t1 - t0) / len(queries):.1f} ms/query")

# top hits of one query from both engines
print(pruned[0].hits()[:3])
print(full[0].hits()[:3])
