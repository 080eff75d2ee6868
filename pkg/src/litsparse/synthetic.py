"""Planted-synonym product search data.

Items are titles built from a brand, a category, two attributes, a model
code and filler words. Every category and attribute is a *concept* with one
canonical surface form (used in item titles) and several generated synonyms.
Queries restate an item's concepts, usually through a synonym, so a purely
lexical matcher only sees the brand and the occasional canonical word.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TextPair, write_jsonl_corpus, write_pairs_tsv
from .evaluation import write_qrels


@dataclass(frozen=True)
class SyntheticConfig:
    num_items: int = 2000
    num_train: int = 500
    num_test: int = 100
    num_brands: int = 40
    num_categories: int = 24
    num_attributes: int = 48
    forms_per_concept: int = 4      # canonical + synonyms
    num_fillers: int = 150
    fillers_per_item: int = 2
    p_brand: float = 0.8            # query mentions the brand
    p_canonical: float = 0.15       # a query concept keeps its canonical form
    p_code: float = 0.1             # query mentions the model code
    seed: int = 42


@dataclass
class SyntheticData:
    items: list[tuple[str, str]]            # (item_id, title)
    train: list[TextPair]
    test_queries: list[tuple[str, str]]     # (query_id, text)
    qrels: dict[str, list[str]]
    synonyms: dict[str, list[str]]          # canonical form -> synonyms

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "items": out / "items.jsonl",
            "train": out / "train_pairs.tsv",
            "queries": out / "test_queries.jsonl",
            "qrels": out / "test_qrels.tsv",
        }
        write_jsonl_corpus(paths["items"], self.items)
        write_pairs_tsv(paths["train"], self.train)
        write_jsonl_corpus(paths["queries"], self.test_queries)
        write_qrels(paths["qrels"], self.qrels)
        return paths


def _words(rng: np.random.Generator, n: int, prefix: str) -> list[str]:
    """``n`` distinct pronounceable tokens with a type prefix."""
    cons, vows = "bcdfghjklmnprstvz", "aeiou"
    out: set[str] = set()
    while len(out) < n:
        syll = [cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(3)]
        out.add(prefix + "".join(syll))
    return sorted(out)


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    rng = np.random.default_rng(cfg.seed)
    brands = _words(rng, cfg.num_brands, "b")
    fillers = _words(rng, cfg.num_fillers, "f")
    cat_forms = np.array(_words(rng, cfg.num_categories * cfg.forms_per_concept, "c")).reshape(
        cfg.num_categories, cfg.forms_per_concept)
    att_forms = np.array(_words(rng, cfg.num_attributes * cfg.forms_per_concept, "a")).reshape(
        cfg.num_attributes, cfg.forms_per_concept)
    rng.shuffle(cat_forms, axis=1)
    rng.shuffle(att_forms, axis=1)

    items = []
    specs = []
    for i in range(cfg.num_items):
        brand = brands[rng.integers(cfg.num_brands)]
        cat = int(rng.integers(cfg.num_categories))
        atts = rng.choice(cfg.num_attributes, size=2, replace=False).tolist()
        code = f"m{i:04d}x"
        words = [brand, cat_forms[cat, 0], att_forms[atts[0], 0], att_forms[atts[1], 0], code]
        words += rng.choice(fillers, size=cfg.fillers_per_item, replace=False).tolist()
        order = [0] + (1 + rng.permutation(len(words) - 1)).tolist()
        items.append((f"item{i:05d}", " ".join(words[j] for j in order)))
        specs.append((brand, cat, atts, code))

    def surface(forms: np.ndarray) -> str:
        if rng.random() < cfg.p_canonical:
            return str(forms[0])
        return str(forms[1 + rng.integers(len(forms) - 1)])

    def make_query(i: int) -> str:
        brand, cat, atts, code = specs[i]
        words = [surface(cat_forms[cat])] + [surface(att_forms[a]) for a in atts]
        rng.shuffle(words)
        if rng.random() < cfg.p_brand:
            words.insert(0, brand)
        if rng.random() < cfg.p_code:
            words.append(code)
        return " ".join(words)

    picked = rng.choice(cfg.num_items, size=cfg.num_train + cfg.num_test, replace=False)
    train_ids, test_ids = picked[: cfg.num_train], picked[cfg.num_train:]
    train = [TextPair(f"tq{n:05d}", make_query(int(i)), items[i][0], items[i][1])
             for n, i in enumerate(train_ids)]
    test_queries, qrels = [], {}
    for n, i in enumerate(test_ids):
        qid = f"q{n:05d}"
        test_queries.append((qid, make_query(int(i))))
        qrels[qid] = [items[i][0]]
    synonyms = {str(f[0]): [str(x) for x in f[1:]] for f in np.concatenate([cat_forms, att_forms])}
    return SyntheticData(items, train, test_queries, qrels, synonyms)
