import dataclasses
import itertools
import json
import math

import numpy as np
import pytest

from litsparse.corpus import Pair
from litsparse.encoder import init_params
from litsparse.head import HeadOutput, MODES
from litsparse.sparse import SparseVec
from litsparse.training import (NORM_MODES, AdamW, BatchReps, TrainConfig, TrainingError, WindowSchedule,
                                _infonce_from_scores, batch_objective, conditional_topk, dynamic_window_update,
                                flops_loss, flops_weight, format_config, infonce_lfw, iter_batches,
                                parse_config, similarity_lfw, total_loss, train, train_step)

from gradcheck import RTOL, check_params

A, B, C, E = 0, 1, 2, 4


def sv(d):
    return SparseVec.from_dict(d)


def reps(*finals):
    return [HeadOutput(f, None, f) for f in finals]


def test_conditional_topk_examples():
    w = sv({A: 1.0, B: 2.0, C: 3.0})
    assert conditional_topk(w, 5) == w
    assert conditional_topk(sv({A: 3, B: 1, C: 2, E: 5}), 2).to_dict() == {A: 3.0, E: 5.0}
    assert conditional_topk(sv({A: 1, B: 1, C: 1}), 2).to_dict() == {A: 1.0, B: 1.0}


def test_similarity_examples():
    cfg = TrainConfig(k_q=2, k_d=2)
    assert similarity_lfw(sv({A: 1}), sv({A: 2}), cfg) == pytest.approx(2.0)
    assert similarity_lfw(sv({A: 1}), sv({B: 2}), cfg) == 0.0
    assert similarity_lfw(sv({A: 3, B: 4}), sv({A: 1, B: 2, C: 5}), cfg) == pytest.approx(1.6)


def test_similarity_norm_modes():
    q, d = sv({A: 3, B: 4}), sv({A: 1, B: 2})
    expect = {"q_norm": 2.2, "all_norm": 2.2 / math.sqrt(5), "no_norm": 11.0,
              "d_norm": 11 / math.sqrt(5), "l1_q_norm": 11 / 7}
    for mode, value in expect.items():
        assert similarity_lfw(q, d, TrainConfig(norm_mode=mode)) == pytest.approx(value), mode
    assert similarity_lfw(SparseVec.empty(), d, TrainConfig()) == 0.0


def test_infonce_examples():
    cfg = TrainConfig()
    assert infonce_lfw(BatchReps(reps(sv({A: 1})), reps(sv({A: 1}))), cfg) == 0.0
    same = BatchReps(reps(sv({A: 1}), sv({A: 1})), reps(sv({A: 1}), sv({A: 1})))
    assert infonce_lfw(same, cfg) == pytest.approx(math.log(2), abs=1e-12)
    sep = BatchReps(reps(sv({A: 1}), sv({B: 1})), reps(sv({A: 1}), sv({B: 1})))
    assert infonce_lfw(sep, cfg) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert infonce_lfw(sep, cfg) == pytest.approx(0.3133, abs=1e-4)


def test_infonce_matches_direct_softmax():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.normal(scale=3, size=(5, 5))
        direct = np.mean([-math.log(math.exp(s[i, i]) / sum(math.exp(x) for x in s[i])) for i in range(5)])
        loss, _ = _infonce_from_scores(s)
        assert loss == pytest.approx(direct, abs=1e-10)
        assert loss > 0


def test_infonce_rejects_non_finite():
    with pytest.raises(TrainingError):
        _infonce_from_scores(np.array([[np.inf, 0], [0, 1]]))


def test_infonce_permutation_invariant():
    rng = np.random.default_rng(3)
    qs = [SparseVec.from_dense(np.maximum(rng.normal(size=8), 0)) for _ in range(4)]
    ds = [SparseVec.from_dense(np.maximum(rng.normal(size=8), 0)) for _ in range(4)]
    cfg = TrainConfig(k_q=3, k_d=4)
    base = infonce_lfw(BatchReps(reps(*qs), reps(*ds)), cfg)
    perm = [2, 0, 3, 1]
    shuffled = infonce_lfw(BatchReps(reps(*[qs[i] for i in perm]), reps(*[ds[i] for i in perm])), cfg)
    assert shuffled == pytest.approx(base, abs=1e-12)


def test_flops_examples():
    assert flops_loss([sv({A: 1, B: 2})]) == 5.0
    assert flops_loss([sv({A: 1}), sv({B: 1})]) == 0.5
    assert flops_loss([SparseVec.empty(), SparseVec.empty()]) == 0.0
    with pytest.raises(ValueError):
        flops_loss([])


def test_flops_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dense = np.maximum(rng.normal(size=(6, 15)), 0)
        brute = sum((sum(dense[i, j] for i in range(6)) / 6) ** 2 for j in range(15))
        assert flops_loss([SparseVec.from_dense(r) for r in dense]) == pytest.approx(brute, abs=1e-10)


def test_flops_weight_schedule():
    assert flops_weight(0.4, 0, 100) == 0.0
    assert flops_weight(0.4, 50, 100) == pytest.approx(0.1)
    assert flops_weight(0.4, 500, 100) == 0.4
    assert flops_weight(0.4, 0, 0) == 0.4


def test_total_loss_parts():
    batch = BatchReps(reps(sv({A: 1}), sv({B: 1})), reps(sv({A: 1}), sv({B: 2})))
    zero = TrainConfig(lambda_q=0, lambda_d=0)
    loss, parts = total_loss(batch, zero, 10)
    assert loss == parts["rank_loss"]
    warm = TrainConfig(lambda_q=1.0, lambda_d=1.0, warmup_steps_flops=10)
    assert total_loss(batch, warm, 0)[0] == parts["rank_loss"]
    loss, parts = total_loss(batch, warm, 5)
    assert loss == pytest.approx(parts["rank_loss"] + 0.25 * (parts["flops_q"] + parts["flops_d"]))


def test_dynamic_window_examples():
    sched = WindowSchedule("dynamic")
    assert dynamic_window_update(0.95, 0.0, (256, 512), sched) == (128, 512)
    assert dynamic_window_update(0.5, 0.5, (256, 512), sched) == (256, 512)
    assert dynamic_window_update(0.99, 0.99, (64, 128), sched) == (64, 128)
    assert dynamic_window_update(0.9, 0.91, (256, 512), sched) == (256, 256)
    assert dynamic_window_update(0.99, 0.99, (256, 512), WindowSchedule()) == (256, 512)


def test_window_schedule_parse_roundtrip():
    for text in ("fixed", "dynamic:256,128,64:512,256,128:0.9", "dynamic:8,4:16,8:0.5"):
        assert str(WindowSchedule.parse(text)) == text
    assert WindowSchedule.parse("dynamic") == WindowSchedule("dynamic")
    with pytest.raises(ValueError):
        WindowSchedule.parse("shrinking")


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.k_q, cfg.k_d, cfg.lambda_q, cfg.lambda_d) == (256, 512, 5e-3, 1e-3)
    assert (cfg.lr, cfg.weight_decay, cfg.batch_size) == (3e-5, 0.1, 64)


def test_config_parsing():
    cfg = parse_config("# toy\nk_q = 8\nk_d=16  # items\nlfw=false\nwindow_schedule=dynamic\nnorm_mode=all_norm\n")
    assert (cfg.k_q, cfg.k_d, cfg.lfw, cfg.norm_mode) == (8, 16, False, "all_norm")
    assert cfg.window_schedule.kind == "dynamic"
    assert parse_config(format_config(cfg)) == cfg
    with pytest.raises(ValueError, match="line 2: unknown key 'temperature'"):
        parse_config("k_q=8\ntemperature=0.1\n")
    with pytest.raises(ValueError, match="line 1"):
        parse_config("k_q=eight\n")
    with pytest.raises(ValueError, match="batch_size"):
        parse_config("batch_size=1\n")


def _toy_pairs(n=8, V=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        q = tuple(int(x) for x in rng.integers(1, V, size=3))
        d = tuple(int(x) for x in rng.integers(1, V, size=4)) + q[:1]
        out.append(Pair(f"q{i}", q, f"d{i}", d))
    return out


def test_zero_learning_rate_leaves_params_bit_exact():
    p = init_params(12, 4, seed=1)
    before = {n: a.copy() for n, a in p.tensors()}
    cfg = TrainConfig(lr=0.0, k_q=4, k_d=4, batch_size=4)
    opt = AdamW(0.0, cfg.weight_decay)
    for step in range(3):
        train_step(p, opt, _toy_pairs(4), cfg, step)
    for n, a in p.tensors():
        assert a.tobytes() == before[n].tobytes()


def test_biases_not_decayed():
    p = init_params(6, 2, seed=0)
    p.mix_b[:] = 1.0
    p.head_b[:] = 1.0
    p.lrn_b[:] = 1.0
    opt = AdamW(0.1, weight_decay=0.5)
    opt.update(p, p.zeros_like(), 0.1)
    assert np.all(p.mix_b == 1.0) and np.all(p.head_b == 1.0) and np.all(p.lrn_b == 1.0)
    assert np.all(np.abs(p.emb) <= np.abs(init_params(6, 2, seed=0).emb))


def test_descent_on_repeated_batch():
    pairs = _toy_pairs(8)
    cfg = TrainConfig(lambda_q=0, lambda_d=0, lr=1e-3, weight_decay=0.0, k_q=6, k_d=8, batch_size=8, seed=42)
    p = init_params(12, 8, seed=42)
    opt = AdamW(cfg.lr, cfg.weight_decay)
    losses = []
    for step in range(50):
        _, rec = train_step(p, opt, pairs, cfg, step)
        losses.append(rec["loss"])
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


def test_train_step_window_bound_and_record():
    cfg = TrainConfig(k_q=2, k_d=3, batch_size=4, lr=1e-2)
    p = init_params(12, 4, seed=3)
    _, rec = train_step(p, AdamW(cfg.lr, 0.1), _toy_pairs(4), cfg, 0)
    assert rec["nnz_q_window_max"] <= 2 and rec["nnz_d_window_max"] <= 3
    assert (rec["k_q"], rec["k_d"]) == (2, 3)
    with pytest.raises(ValueError):
        train_step(p, AdamW(cfg.lr, 0.1), _toy_pairs(1), cfg, 0)


def test_windowed_out_entries_get_no_ranking_gradient():
    p = init_params(12, 4, seed=9)
    rng = np.random.default_rng(9)
    for _, arr in p.tensors():
        arr[...] = rng.normal(size=arr.shape)
    q, d = [[1, 2, 3], [4, 5]], [[6, 7, 1], [8, 9, 4]]
    cfg = TrainConfig(lambda_q=0, lambda_d=0, mode="no_lrn")
    res = batch_objective(p, q, d, cfg, 0, 1, 1)
    # only the last position's logits feed no_lrn, and only kept dims carry gradient
    kept = res.q_masks.any(axis=0) | res.d_masks.any(axis=0)
    assert np.all(res.grads.head_b[~kept] == 0)


def test_batch_objective_matches_total_loss():
    p = init_params(12, 4, seed=4)
    pairs = _toy_pairs(4)
    cfg = TrainConfig(k_q=3, k_d=4, lambda_q=0.3, lambda_d=0.2, warmup_steps_flops=10)
    res = batch_objective(p, [x.query for x in pairs], [x.item for x in pairs], cfg, 7, 3, 4, need_grad=False)
    batch = BatchReps([t.to_output() for t in res.q_traces], [t.to_output() for t in res.d_traces])
    assert res.loss == pytest.approx(total_loss(batch, cfg, 7)[0], abs=1e-12)


def _rand_params(V, H, seed):
    p = init_params(V, H, seed)
    rng = np.random.default_rng(seed)
    for _, arr in p.tensors():
        arr[...] = rng.normal(size=arr.shape)
    return p


@pytest.mark.parametrize("case", list(enumerate(itertools.product(NORM_MODES, MODES))))
def test_full_gradient(case):
    seed, (norm_mode, mode) = case
    V, H = 12, 4
    rng = np.random.default_rng(seed)
    p = _rand_params(V, H, int(rng.integers(1000)))
    q = [rng.integers(0, V, size=3).tolist() for _ in range(2)]
    d = [rng.integers(0, V, size=4).tolist() for _ in range(2)]
    cfg = TrainConfig(norm_mode=norm_mode, mode=mode, lambda_q=0.05, lambda_d=0.03, warmup_steps_flops=4)

    def evaluate(params):
        r = batch_objective(params, q, d, cfg, 3, 3, 4, need_grad=False)
        return r.loss, r.pattern()

    g = batch_objective(p, q, d, cfg, 3, 3, 4).grads
    worst, checked, _, where = check_params(p, g, evaluate)
    assert checked > 0
    assert worst < RTOL, where


def test_iter_batches_deterministic_and_complete():
    pairs = _toy_pairs(10)
    cfg = TrainConfig(batch_size=4, epochs=2, seed=5)
    a = [[x.query_id for x in b] for b in iter_batches(pairs, cfg)]
    b = [[x.query_id for x in b] for b in iter_batches(pairs, cfg)]
    assert a == b
    assert sorted(sum(a[:3], [])) == sorted(x.query_id for x in pairs)
    # a trailing single pair cannot form a batch
    cfg = TrainConfig(batch_size=3, epochs=1)
    assert sum(len(b) for b in iter_batches(pairs, cfg)) == 9


def test_train_log_and_reproducibility(tmp_path):
    pairs = _toy_pairs(8)
    cfg = TrainConfig(batch_size=4, epochs=3, k_q=4, k_d=6, lr=1e-2, hidden=4)
    p1, recs = train(pairs, 12, cfg, log_path=tmp_path / "a.jsonl")
    p2, _ = train(pairs, 12, cfg, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(a.tobytes() == getattr(p2, n).tobytes() for n, a in p1.tensors())
    lines = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(lines) == len(recs) == 6
    assert set(lines[0]) == {"step", "loss", "rank_loss", "flops_q", "flops_d", "nnz_q_mean",
                             "nnz_d_mean", "k_q", "k_d"}


def test_train_max_steps_and_dynamic_window():
    pairs = _toy_pairs(8)
    sched = WindowSchedule("dynamic", (12, 6, 3), (12, 6, 3), 0.9)
    cfg = TrainConfig(batch_size=4, epochs=10, max_steps=5, window_schedule=sched, hidden=4)
    _, recs = train(pairs, 12, cfg)
    assert len(recs) == 5
    # every vector has < 12 nonzeros in V=12 only if some dim is zero; windows never grow
    ks = [r["k_q"] for r in recs]
    assert all(b <= a for a, b in zip(ks, ks[1:]))


def test_config_replace_validates():
    with pytest.raises(ValueError):
        dataclasses.replace(TrainConfig(), k_q=0)
