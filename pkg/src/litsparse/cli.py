"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
from bisect import bisect_left
from pathlib import Path
from typing import Sequence

from . import encoder, index as index_mod
from .corpus import CorpusError, Pair, Vocab, build_vocab, read_jsonl_corpus, read_pairs_tsv, tokenize
from .evaluation import ALL_METRICS, evaluate, flops_overlap, read_qrels
from .head import MODES, encode
from .search import (Bm25Stats, build_bm25, read_run, search_bm25, search_bmm, search_exhaustive,
                     truncate_query, write_run)
from .sparse import read_records, write_records
from .synthetic import SyntheticConfig, generate
from .training import TrainConfig, TrainingError, load_config, train

log = logging.getLogger("litsparse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@contextlib.contextmanager
def atomic_output(path: str | Path):
    """Yield a temp path next to ``path``; rename over it only on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent if str(path.parent) else ".")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# bench-sparsity

def _read_log(path: str | Path) -> dict[int, dict]:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    rows[int(rec["step"])] = rec
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise ValueError(f"{path}: line {lineno} is not a training log record") from None
    if not rows:
        raise ValueError(f"{path}: empty training log")
    return rows


def _nearest(steps: list[int], s: int) -> int:
    i = bisect_left(steps, s)
    if i == 0:
        return steps[0]
    if i == len(steps):
        return steps[-1]
    before, after = steps[i - 1], steps[i]
    return after if after - s < s - before else before


def bench_sparsity(on_log: str | Path, off_log: str | Path) -> list[dict[str, float]]:
    """Align activated-dimension curves of an LFW-on and an LFW-off run.

    Rows follow the union of both step grids; a run without a record at some
    step contributes its nearest-step value (ties take the earlier step).
    """
    on, off = _read_log(on_log), _read_log(off_log)
    on_steps, off_steps = sorted(on), sorted(off)
    rows = []
    for s in sorted(set(on_steps) | set(off_steps)):
        a, b = on[_nearest(on_steps, s)], off[_nearest(off_steps, s)]
        rows.append({"step": s, "nnz_q_on": a["nnz_q_mean"], "nnz_d_on": a["nnz_d_mean"],
                     "nnz_q_off": b["nnz_q_mean"], "nnz_d_off": b["nnz_d_mean"]})
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.synthetic:
        data = generate(SyntheticConfig(seed=cfg.seed))
        paths = data.write(args.synthetic)
        log.info("wrote synthetic dataset to %s", args.synthetic)
        pairs_path = paths["train"]
    elif args.pairs:
        pairs_path = args.pairs
    else:
        raise UsageError("train: one of --pairs or --synthetic is required")
    rows = read_pairs_tsv(pairs_path)
    if args.vocab_in:
        vocab = Vocab.load(args.vocab_in)
    else:
        # the synthetic catalogue is larger than its training pairs; build over all of it
        items = ([t for _, t in read_jsonl_corpus(paths["items"])] if args.synthetic
                 else [r.item_text for r in rows])
        vocab = build_vocab(items + [r.query_text for r in rows], args.vocab_size)
    pairs = [Pair(r.query_id, tokenize(vocab, r.query_text, cfg.max_len), r.item_id,
                  tokenize(vocab, r.item_text, cfg.max_len)) for r in rows]
    with atomic_output(args.log) if args.log else contextlib.nullcontext() as log_tmp:
        params, records = train(pairs, vocab.size, cfg, log_path=log_tmp)
    with atomic_output(args.model) as tmp:
        encoder.save_model(params, tmp)
    with atomic_output(args.vocab) as tmp:
        vocab.save(tmp)
    last = records[-1] if records else {}
    print(json.dumps({"steps": len(records), "loss": last.get("loss"), "vocab_size": vocab.size}))
    return 0


def cmd_encode(args) -> int:
    params = encoder.load_model(args.model)
    vocab = Vocab.load(args.vocab)
    if vocab.size != params.vocab_size:
        raise ValueError(f"vocabulary size {vocab.size} does not match model ({params.vocab_size})")
    records = []
    for rid, text in read_jsonl_corpus(args.input):
        out = encode(params, tokenize(vocab, text, args.max_len), args.mode)
        records.append((rid, out.final if args.store == "final" else out.basic))
    with atomic_output(args.output) as tmp:
        write_records(tmp, records)
    return 0


def cmd_index(args) -> int:
    idx = index_mod.build(read_records(args.input), args.block_size, args.quantization)
    with atomic_output(args.output) as tmp:
        index_mod.save(idx, tmp)
    print(json.dumps({"num_docs": idx.num_docs, "num_terms": len(idx.postings),
                      "num_postings": idx.num_postings()}))
    return 0


def _bm25_queries(args) -> list[tuple[str, tuple[int, ...]]]:
    if not args.vocab:
        raise UsageError("bm25 search needs --vocab")
    vocab = Vocab.load(args.vocab)
    return [(qid, tokenize(vocab, text)) for qid, text in read_jsonl_corpus(args.queries)]


def cmd_search(args) -> int:
    if args.engine == "bm25":
        return _run_bm25(args)
    idx = index_mod.load(args.index)
    fn = search_bmm if args.engine == "bmm" else search_exhaustive
    runs = {}
    for qid, vec in read_records(args.queries):
        runs[qid] = fn(idx, truncate_query(vec, args.query_terms), args.topk).hits()
    with atomic_output(args.output) as tmp:
        write_run(tmp, runs)
    return 0


def _run_bm25(args) -> int:
    stats = Bm25Stats.load(args.index)
    runs = {qid: search_bm25(stats, toks, args.topk).hits() for qid, toks in _bm25_queries(args)}
    with atomic_output(args.output) as tmp:
        write_run(tmp, runs)
    return 0


def cmd_bm25_index(args) -> int:
    vocab = Vocab.load(args.vocab)
    stats = build_bm25(((rid, tokenize(vocab, text)) for rid, text in read_jsonl_corpus(args.corpus)),
                       args.k1, args.b, args.delta)
    with atomic_output(args.output) as tmp:
        stats.save(tmp)
    return 0


def cmd_eval(args) -> int:
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(ALL_METRICS)
    report = evaluate(run, qrels, metrics)
    if args.query_vecs or args.item_vecs:
        if not (args.query_vecs and args.item_vecs):
            raise UsageError("flops overlap needs both --query-vecs and --item-vecs")
        qv = [v for _, v in read_records(args.query_vecs)]
        dv = [v for _, v in read_records(args.item_vecs)]
        report.flops_overlap = flops_overlap(qv, dv, args.flops_pairs, args.seed or 0)
    print(report.to_table())
    if args.json:
        with atomic_output(args.json) as tmp:
            tmp.write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_bench_sparsity(args) -> int:
    rows = bench_sparsity(args.on, args.off)
    with atomic_output(args.output) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="litsparse", description="Learned sparse retrieval toolkit")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (computation is single-threaded)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train an encoder on query/item pairs")
    p.add_argument("--pairs", help="pairs TSV: query_id, query_text, item_id, item_text")
    p.add_argument("--synthetic", metavar="DIR", help="generate the planted-synonym dataset into DIR and train on it")
    p.add_argument("--config", help="key=value training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--vocab-in", help="use this vocabulary instead of building one")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--vocab", required=True, help="output vocabulary file")
    p.add_argument("--log", help="per-step JSONL training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a JSONL corpus into sparse vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="JSONL with id and text")
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=MODES, default="prosper")
    p.add_argument("--store", choices=("final", "basic"), default="final")
    p.add_argument("--max-len", type=int, default=64)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build an inverted index from item vectors")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--quantization", choices=("none", "fixed16"), default="none")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="retrieve top-k items per query")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query vectors (bm25: JSONL text)")
    p.add_argument("--output", required=True, help="run file")
    p.add_argument("--topk", type=int, default=1000)
    p.add_argument("--query-terms", type=int, default=16)
    p.add_argument("--engine", choices=("bmm", "exhaustive", "bm25"), default="bmm")
    p.add_argument("--vocab", help="vocabulary (bm25 engine only)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", help=f"comma list, default {','.join(ALL_METRICS)}")
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--query-vecs")
    p.add_argument("--item-vecs")
    p.add_argument("--flops-pairs", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-sparsity", help="align sparsity curves of LFW-on/off training logs")
    p.add_argument("--on", required=True)
    p.add_argument("--off", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_bench_sparsity)

    p = sub.add_parser("bm25-index", help="build BM25 statistics for a JSONL corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--delta", type=float, default=0.25)
    p.set_defaults(func=cmd_bm25_index)

    p = sub.add_parser("bm25-search", help="BM25 top-k for JSONL queries")
    p.add_argument("--index", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--topk", type=int, default=1000)
    p.set_defaults(func=_run_bm25)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        msg = str(exc)
        if not msg.startswith("usage:"):
            msg = parser.format_usage() + msg
        print(msg, file=sys.stderr)
        return 1
    except (ValueError, OSError, CorpusError, TrainingError) as exc:
        print(f"litsparse: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
