import numpy as np
import pytest
from hypothesis import given, strategies as st

from litsparse.corpus import (UNK, CorpusError, Vocab, build_vocab, load_pairs, read_jsonl_corpus,
                              tokenize)
from litsparse.sparse import SparseVec, read_records, top_entries, write_records


def test_build_vocab_frequency_then_lexicographic():
    v = build_vocab(["a b", "b c"], max_size=4)
    assert v.terms == (UNK, "b", "a", "c")
    assert v.size == 4
    assert all(v.lookup(t) == i for i, t in enumerate(v.terms))


def test_build_vocab_empty():
    with pytest.raises(CorpusError, match="empty corpus"):
        build_vocab([], 5)


def test_build_vocab_minimal():
    assert build_vocab(["x"], 2).terms == (UNK, "x")


def test_build_vocab_caps_size():
    v = build_vocab(["a a a b b c d"], 3)
    assert v.terms == (UNK, "a", "b")


@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=40), st.integers(2, 9), st.randoms())
def test_build_vocab_order_independent(tokens, max_size, rnd):
    texts = [" ".join(tokens[i:i + 3]) for i in range(0, len(tokens), 3)]
    shuffled = tokens[:]
    rnd.shuffle(shuffled)
    texts2 = [" ".join(shuffled[i:i + 2]) for i in range(0, len(shuffled), 2)]
    assert build_vocab(texts, max_size) == build_vocab(texts2, max_size)


def test_tokenize_examples():
    v = Vocab((UNK, "red", "shoe"))
    assert tokenize(v, "red shoe") == (1, 2)
    assert tokenize(v, "zzz") == (0,)
    assert tokenize(v, "RED  Shoe ") == (1, 2)
    with pytest.raises(CorpusError, match="empty text"):
        tokenize(v, "   \t ")


def test_tokenize_truncates_prefix():
    v = build_vocab([" ".join(f"w{i}" for i in range(100))], 200)
    text = " ".join(f"w{i}" for i in range(100))
    ids = tokenize(v, text, max_len=64)
    assert len(ids) == 64
    assert ids == tokenize(v, " ".join(f"w{i}" for i in range(64)))


@given(st.text(alphabet="abc xyz", min_size=1).filter(lambda s: s.split()))
def test_tokenize_deterministic_and_in_range(text):
    v = build_vocab(["a b c", "ab bc"], 4)
    ids = tokenize(v, text)
    assert ids == tokenize(v, text)
    assert all(0 <= i < v.size for i in ids)


def test_vocab_file_roundtrip(tmp_path):
    v = build_vocab(["red shoe red", "blue shoe"], 10)
    v.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == v
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == UNK


def test_load_pairs(tmp_path):
    v = Vocab((UNK, "red", "shoe", "nike"))
    path = tmp_path / "pairs.tsv"
    path.write_text("q1\tred shoe\td1\tnike red shoe\nq2\tshoe\td2\tnike shoe\n")
    pairs = load_pairs(path, v)
    assert [p.query_id for p in pairs] == ["q1", "q2"]
    assert pairs[0].item == (3, 1, 2)


def test_load_pairs_bad_row(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_text("q1\tred shoe\td1\tnike\nq2\tshoe\td2\n")
    with pytest.raises(CorpusError, match="line 2"):
        load_pairs(path, Vocab((UNK, "x")))


def test_load_pairs_empty(tmp_path):
    path = tmp_path / "pairs.tsv"
    path.write_text("")
    with pytest.raises(CorpusError, match="empty corpus"):
        load_pairs(path, Vocab((UNK, "x")))


def test_jsonl_corpus(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "a", "text": "red"}\n\n{"id": "b", "text": "shoe"}\n')
    assert read_jsonl_corpus(path) == [("a", "red"), ("b", "shoe")]
    path.write_text('{"id": 3, "text": "red"}\n')
    with pytest.raises(CorpusError, match="line 1"):
        read_jsonl_corpus(path)


# --- SparseVec -------------------------------------------------------------

def test_sparsevec_from_dense_drops_exact_zeros():
    v = SparseVec.from_dense(np.array([0.0, 1e-300, 0.0, 2.0]))
    assert v.ids.tolist() == [1, 3]


def test_sparsevec_rejects_bad_input():
    with pytest.raises(ValueError):
        SparseVec(np.array([2, 1]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SparseVec(np.array([1]), np.array([0.0]))


def test_top_entries_tie_break():
    v = SparseVec.from_dict({0: 1.0, 1: 1.0, 2: 1.0})
    assert top_entries(v, 2).to_dict() == {0: 1.0, 1: 1.0}


def test_record_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(20):
        ids = np.unique(rng.integers(0, 500, size=rng.integers(0, 30)))
        w = rng.uniform(0.1, 5, size=ids.size).astype(np.float32).astype(np.float64)
        recs.append((f"doc-{i}-é", SparseVec(ids, w)))
    write_records(tmp_path / "v.bin", recs)
    back = list(read_records(tmp_path / "v.bin"))
    assert [r for r, _ in back] == [r for r, _ in recs]
    assert all(a == b for (_, a), (_, b) in zip(back, recs))


def test_record_file_truncated(tmp_path):
    write_records(tmp_path / "v.bin", [("a", SparseVec.from_dict({1: 2.0, 5: 1.0}))])
    data = (tmp_path / "v.bin").read_bytes()
    (tmp_path / "v.bin").write_bytes(data[:-3])
    with pytest.raises(ValueError, match="offset"):
        list(read_records(tmp_path / "v.bin"))
