"""Vocabulary, whitespace tokenizer and dataset readers."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

UNK = "[UNK]"
DEFAULT_MAX_LEN = 64

TokenSeq = tuple[int, ...]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    terms: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.terms) < 2 or self.terms[0] != UNK:
            raise CorpusError("vocabulary needs the unknown term at id 0 and at least one more term")
        lookup = {t: i for i, t in enumerate(self.terms)}
        if len(lookup) != len(self.terms):
            raise CorpusError("duplicate terms in vocabulary")
        object.__setattr__(self, "id_of", lookup)

    @property
    def size(self) -> int:
        return len(self.terms)

    def __len__(self):
        return len(self.terms)

    def lookup(self, term: str) -> int:
        return self.id_of.get(term, 0)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.terms), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def _words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(texts: Iterable[str], max_size: int) -> Vocab:
    """UNK plus the ``max_size - 1`` most frequent tokens, ties lexicographic."""
    if max_size < 2:
        raise CorpusError("max_size must be >= 2")
    counts: Counter[str] = Counter()
    seen_any = False
    for text in texts:
        seen_any = True
        counts.update(_words(text))
    if not seen_any or not counts:
        raise CorpusError("empty corpus")
    counts.pop(UNK.lower(), None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab((UNK,) + tuple(t for t, _ in ranked[: max_size - 1]))


def tokenize(vocab: Vocab, text: str, max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    words = _words(text)
    if not words:
        raise CorpusError("empty text")
    return tuple(vocab.lookup(w) for w in words[:max_len])


class Pair(NamedTuple):
    query_id: str
    query: TokenSeq
    item_id: str
    item: TokenSeq


class TextPair(NamedTuple):
    query_id: str
    query_text: str
    item_id: str
    item_text: str


def read_pairs_tsv(path: str | Path) -> list[TextPair]:
    rows = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise CorpusError(f"line {lineno}: expected 4 tab-separated columns, got {len(cols)}")
            if not cols[1].strip() or not cols[3].strip():
                raise CorpusError(f"line {lineno}: empty query or item text")
            rows.append(TextPair(*cols))
    if not rows:
        raise CorpusError("empty corpus")
    return rows


def load_pairs(path: str | Path, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> list[Pair]:
    """Parse a pairs TSV and tokenize both sides, keeping file order."""
    return [
        Pair(r.query_id, tokenize(vocab, r.query_text, max_len), r.item_id, tokenize(vocab, r.item_text, max_len))
        for r in read_pairs_tsv(path)
    ]


def write_pairs_tsv(path: str | Path, rows: Iterable[TextPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write("\t".join(r) + "\n")


def read_jsonl_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read ``{"id": ..., "text": ...}`` lines into (id, text) pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not isinstance(obj.get("text"), str):
                raise CorpusError(f"line {lineno}: expected string fields 'id' and 'text'")
            out.append((obj["id"], obj["text"]))
    if not out:
        raise CorpusError("empty corpus")
    return out


def write_jsonl_corpus(path: str | Path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid, text in records:
            fh.write(json.dumps({"id": rid, "text": text}, ensure_ascii=False) + "\n")
