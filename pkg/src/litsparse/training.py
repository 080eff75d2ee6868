"""Contrastive training of the sparse encoder.

The objective is in-batch InfoNCE over windowed (conditional top-k) and
normalised similarities, plus FLOPS penalties on the basic representations
whose weights ramp up quadratically.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Pair
from .encoder import GradientSet, ModelParams, init_params
from .head import HeadOutput, HeadTrace, encode_trace, head_backward
from .sparse import SparseVec, top_entries

log = logging.getLogger(__name__)

NORM_MODES = ("q_norm", "all_norm", "no_norm", "d_norm", "l1_q_norm")
DEFAULT_DYNAMIC_Q = (256, 128, 64)
DEFAULT_DYNAMIC_D = (512, 256, 128)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowSchedule:
    kind: str = "fixed"
    sizes_q: tuple[int, ...] = DEFAULT_DYNAMIC_Q
    sizes_d: tuple[int, ...] = DEFAULT_DYNAMIC_D
    threshold: float = 0.9

    @classmethod
    def parse(cls, text: str) -> WindowSchedule:
        """``fixed``, ``dynamic`` or ``dynamic:256,128,64:512,256,128:0.9``."""
        parts = text.strip().split(":")
        if parts[0] == "fixed" and len(parts) == 1:
            return cls()
        if parts[0] != "dynamic" or len(parts) not in (1, 3, 4):
            raise ValueError(f"bad window_schedule {text!r}")
        if len(parts) == 1:
            return cls("dynamic")
        sizes_q = tuple(int(x) for x in parts[1].split(","))
        sizes_d = tuple(int(x) for x in parts[2].split(","))
        threshold = float(parts[3]) if len(parts) == 4 else 0.9
        return cls("dynamic", sizes_q, sizes_d, threshold)

    def __str__(self):
        if self.kind == "fixed":
            return "fixed"
        return "dynamic:{}:{}:{}".format(
            ",".join(map(str, self.sizes_q)), ",".join(map(str, self.sizes_d)), self.threshold)


@dataclass
class TrainConfig:
    k_q: int = 256
    k_d: int = 512
    lambda_q: float = 5e-3
    lambda_d: float = 1e-3
    warmup_steps_flops: int = 0
    warmup_steps_lr: int = 0
    lr: float = 3e-5
    weight_decay: float = 0.1
    batch_size: int = 64
    epochs: int = 5
    seed: int = 42
    norm_mode: str = "q_norm"
    window_schedule: WindowSchedule = field(default_factory=WindowSchedule)
    # toy-model and loop settings
    lfw: bool = True
    mode: str = "prosper"
    hidden: int = 32
    max_len: int = 64
    max_steps: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.window_schedule, str):
            self.window_schedule = WindowSchedule.parse(self.window_schedule)
        self.validate()

    def validate(self) -> None:
        if self.k_q < 1 or self.k_d < 1:
            raise ValueError("window sizes must be >= 1")
        if self.lambda_q < 0 or self.lambda_d < 0:
            raise ValueError("FLOPS weights must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")

    def initial_windows(self) -> tuple[int, int]:
        if self.window_schedule.kind == "dynamic":
            return self.window_schedule.sizes_q[0], self.window_schedule.sizes_d[0]
        return self.k_q, self.k_d


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, WindowSchedule):
        return WindowSchedule.parse(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    base = base or TrainConfig()
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(key, value, getattr(base, key))
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# ---------------------------------------------------------------------------
# sparse-vector API

def conditional_topk(w: SparseVec, k: int) -> SparseVec:
    """Unchanged if ``nnz(w) <= k``, otherwise the ``k`` largest entries."""
    return top_entries(w, k)


def _normalize_sparse(v: SparseVec, kind: str) -> SparseVec | None:
    if v.nnz == 0:
        return None
    norm = np.linalg.norm(v.weights) if kind == "l2" else v.weights.sum()
    return SparseVec(v.ids, v.weights / norm)


def _side_norms(norm_mode: str) -> tuple[str | None, str | None]:
    return {
        "q_norm": ("l2", None),
        "all_norm": ("l2", "l2"),
        "no_norm": (None, None),
        "d_norm": (None, "l2"),
        "l1_q_norm": ("l1", None),
    }[norm_mode]


def similarity_lfw(wq: SparseVec, wd: SparseVec, cfg: TrainConfig, k_q: int | None = None,
                   k_d: int | None = None) -> float:
    k_q = cfg.k_q if k_q is None else k_q
    k_d = cfg.k_d if k_d is None else k_d
    q = conditional_topk(wq, k_q)
    d = conditional_topk(wd, k_d)
    qn, dn = _side_norms(cfg.norm_mode)
    if qn:
        q = _normalize_sparse(q, qn)
    if dn:
        d = _normalize_sparse(d, dn)
    if q is None or d is None:
        return 0.0
    return q.dot(d)


@dataclass
class BatchReps:
    queries: list[HeadOutput]
    items: list[HeadOutput]

    def __post_init__(self):
        if len(self.queries) != len(self.items) or not self.queries:
            raise ValueError("queries and items must be aligned and non-empty")


def _infonce_from_scores(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over rows with the diagonal as positives, and dL/dscores."""
    if not np.all(np.isfinite(scores)):
        raise TrainingError("non-finite similarity score")
    b = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    loss = float(np.mean(np.log(denom) - np.diag(shifted)))
    grad = expd / denom[:, None]
    grad[np.arange(b), np.arange(b)] -= 1.0
    return loss, grad / b


def infonce_lfw(batch: BatchReps, cfg: TrainConfig, k_q: int | None = None, k_d: int | None = None) -> float:
    scores = np.array([[similarity_lfw(q.final, d.final, cfg, k_q, k_d) for d in batch.items]
                       for q in batch.queries])
    return _infonce_from_scores(scores)[0]


def flops_loss(reps: Sequence[SparseVec]) -> float:
    if not reps:
        raise ValueError("flops_loss needs at least one vector")
    ids = np.concatenate([r.ids for r in reps])
    if ids.size == 0:
        return 0.0
    weights = np.concatenate([r.weights for r in reps])
    _, inv = np.unique(ids, return_inverse=True)
    mean = np.bincount(inv, weights=weights) / len(reps)
    return float(np.sum(mean ** 2))


def flops_weight(target: float, step: int, warmup: int) -> float:
    """Quadratic ramp ``target * min(1, step / warmup) ** 2``."""
    if warmup <= 0:
        return target
    return target * min(1.0, step / warmup) ** 2


def total_loss(batch: BatchReps, cfg: TrainConfig, step: int, k_q: int | None = None,
               k_d: int | None = None) -> tuple[float, dict[str, float]]:
    rank = infonce_lfw(batch, cfg, k_q, k_d)
    fq = flops_loss([q.basic for q in batch.queries])
    fd = flops_loss([d.basic for d in batch.items])
    lq = flops_weight(cfg.lambda_q, step, cfg.warmup_steps_flops)
    ld = flops_weight(cfg.lambda_d, step, cfg.warmup_steps_flops)
    loss = rank + lq * fq + ld * fd
    return loss, {"loss": loss, "rank_loss": rank, "flops_q": fq, "flops_d": fd,
                  "lambda_q": lq, "lambda_d": ld}


# ---------------------------------------------------------------------------
# dense, differentiable batch objective

def _topk_mask(dense: np.ndarray, k: int | None) -> np.ndarray:
    mask = dense != 0
    nnz = int(mask.sum())
    if k is None or nnz <= k:
        return mask
    # stable sort on -w keeps lower ids first among equal weights
    keep = np.argsort(-dense, kind="stable")[:k]
    mask = np.zeros_like(mask)
    mask[keep] = True
    return mask


def _norm_forward(v: np.ndarray, kind: str | None):
    if kind is None:
        return v, 1.0
    n = np.linalg.norm(v) if kind == "l2" else v.sum()
    if n == 0:
        return np.zeros_like(v), 0.0
    return v / n, n


def _norm_backward(grad_out: np.ndarray, normed: np.ndarray, n: float, kind: str | None) -> np.ndarray:
    if kind is None:
        return grad_out
    if n == 0:
        return np.zeros_like(grad_out)
    if kind == "l2":
        return (grad_out - normed * np.dot(normed, grad_out)) / n
    return (grad_out - np.dot(normed, grad_out)) / n


@dataclass
class BatchResult:
    loss: float
    parts: dict[str, float]
    grads: GradientSet | None
    q_traces: list[HeadTrace]
    d_traces: list[HeadTrace]
    q_masks: np.ndarray
    d_masks: np.ndarray

    def pattern(self) -> bytes:
        chunks = [t.pattern() for t in self.q_traces + self.d_traces]
        chunks.append(self.q_masks.tobytes())
        chunks.append(self.d_masks.tobytes())
        return b"".join(chunks)


def batch_objective(p: ModelParams, queries: Sequence[Sequence[int]], items: Sequence[Sequence[int]],
                    cfg: TrainConfig, step: int, k_q: int | None, k_d: int | None,
                    need_grad: bool = True) -> BatchResult:
    """Loss of one aligned batch and, optionally, its exact gradient.

    ``k_q`` / ``k_d`` of ``None`` disable the window on that side.
    Windowed-out entries receive zero ranking gradient.
    """
    b = len(queries)
    if b != len(items) or b == 0:
        raise ValueError("queries and items must be aligned and non-empty")
    q_tr = [encode_trace(p, s, cfg.mode) for s in queries]
    d_tr = [encode_trace(p, s, cfg.mode) for s in items]
    Wq = np.stack([t.final for t in q_tr])
    Wd = np.stack([t.final for t in d_tr])
    q_mask = np.stack([_topk_mask(w, k_q) for w in Wq])
    d_mask = np.stack([_topk_mask(w, k_d) for w in Wd])
    qk, dk = Wq * q_mask, Wd * d_mask
    qkind, dkind = _side_norms(cfg.norm_mode)
    qn = [_norm_forward(v, qkind) for v in qk]
    dn = [_norm_forward(v, dkind) for v in dk]
    Qn = np.stack([v for v, _ in qn])
    Dn = np.stack([v for v, _ in dn])
    scores = Qn @ Dn.T
    rank, d_scores = _infonce_from_scores(scores)

    Bq = np.stack([t.basic for t in q_tr])
    Bd = np.stack([t.basic for t in d_tr])
    mean_q, mean_d = Bq.mean(axis=0), Bd.mean(axis=0)
    fq, fd = float(np.sum(mean_q ** 2)), float(np.sum(mean_d ** 2))
    lq = flops_weight(cfg.lambda_q, step, cfg.warmup_steps_flops)
    ld = flops_weight(cfg.lambda_d, step, cfg.warmup_steps_flops)
    loss = rank + lq * fq + ld * fd
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}: rank={rank} flops_q={fq} flops_d={fd}")
    parts = {"loss": loss, "rank_loss": rank, "flops_q": fq, "flops_d": fd}

    grads = None
    if need_grad:
        grads = p.zeros_like()
        dQn = d_scores @ Dn
        dDn = d_scores.T @ Qn
        dflops_q = lq * 2.0 * mean_q / b
        dflops_d = ld * 2.0 * mean_d / b
        for i, t in enumerate(q_tr):
            d_final = _norm_backward(dQn[i], qn[i][0], qn[i][1], qkind) * q_mask[i]
            head_backward(p, t, d_final, dflops_q, grads)
        for j, t in enumerate(d_tr):
            d_final = _norm_backward(dDn[j], dn[j][0], dn[j][1], dkind) * d_mask[j]
            head_backward(p, t, d_final, dflops_d, grads)
    return BatchResult(loss, parts, grads, q_tr, d_tr, q_mask, d_mask)


# ---------------------------------------------------------------------------
# optimiser and loop

_NO_DECAY = ("mix_b", "head_b", "lrn_b")


@dataclass
class AdamW:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, p: ModelParams, g: GradientSet, lr: float) -> None:
        """Decoupled weight decay; biases are not decayed. Updates ``p`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, param in p.tensors():
            grad = getattr(g, name)
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            if lr == 0.0:
                continue
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if name not in _NO_DECAY and self.weight_decay:
                step = step + self.weight_decay * param
            param -= lr * step


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps_lr <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps_lr)


def dynamic_window_update(frac_q: float, frac_d: float, windows: tuple[int, int],
                          schedule: WindowSchedule) -> tuple[int, int]:
    """Shrink a side's window to the next listed size once more than
    ``threshold`` of its batch members have fewer nonzeros than the window."""
    if schedule.kind != "dynamic":
        return windows

    def advance(size, frac, sizes):
        if frac <= schedule.threshold or size not in sizes:
            return size
        i = sizes.index(size)
        return sizes[i + 1] if i + 1 < len(sizes) else size

    return (advance(windows[0], frac_q, schedule.sizes_q),
            advance(windows[1], frac_d, schedule.sizes_d))


def train_step(p: ModelParams, opt: AdamW, batch: Sequence[Pair], cfg: TrainConfig, step: int,
               windows: tuple[int, int] | None = None) -> tuple[ModelParams, dict]:
    """One optimiser step on an aligned batch. Returns the updated params
    (modified in place) and a metrics record."""
    if len(batch) < 2:
        raise ValueError("train_step needs at least 2 pairs")
    windows = windows or cfg.initial_windows()
    k_q, k_d = windows if cfg.lfw else (None, None)
    res = batch_objective(p, [b.query for b in batch], [b.item for b in batch], cfg, step, k_q, k_d)
    lr = learning_rate(cfg, step)
    opt.update(p, res.grads, lr)

    nnz_basic_q = [int(np.count_nonzero(t.basic)) for t in res.q_traces]
    nnz_basic_d = [int(np.count_nonzero(t.basic)) for t in res.d_traces]
    nnz_final_q = np.array([np.count_nonzero(t.final) for t in res.q_traces])
    nnz_final_d = np.array([np.count_nonzero(t.final) for t in res.d_traces])
    record = {
        "step": step,
        **res.parts,
        "nnz_q_mean": float(np.mean(nnz_basic_q)),
        "nnz_d_mean": float(np.mean(nnz_basic_d)),
        "k_q": windows[0],
        "k_d": windows[1],
        "nnz_q_window_max": int(res.q_masks.sum(axis=1).max()),
        "nnz_d_window_max": int(res.d_masks.sum(axis=1).max()),
        "frac_q_below": float(np.mean(nnz_final_q < windows[0])),
        "frac_d_below": float(np.mean(nnz_final_d < windows[1])),
        "lr": lr,
    }
    return p, record


LOG_FIELDS = ("step", "loss", "rank_loss", "flops_q", "flops_d", "nnz_q_mean", "nnz_d_mean", "k_q", "k_d")


def iter_batches(pairs: Sequence[Pair], cfg: TrainConfig) -> Iterable[list[Pair]]:
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            if len(chunk) >= 2:
                yield [pairs[i] for i in chunk]


def train(pairs: Sequence[Pair], vocab_size: int, cfg: TrainConfig, params: ModelParams | None = None,
          log_path: str | Path | None = None) -> tuple[ModelParams, list[dict]]:
    """Run the full loop. Stops after ``cfg.epochs`` or ``cfg.max_steps``."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 training pairs")
    p = params if params is not None else init_params(vocab_size, cfg.hidden, cfg.seed)
    opt = AdamW(cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    windows = cfg.initial_windows()
    records = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        step = 0
        for batch in iter_batches(pairs, cfg):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            p, rec = train_step(p, opt, batch, cfg, step, windows)
            records.append(rec)
            if fh:
                fh.write(json.dumps({k: rec[k] for k in LOG_FIELDS}) + "\n")
            windows = dynamic_window_update(rec["frac_q_below"], rec["frac_d_below"], windows, cfg.window_schedule)
            if step % 100 == 0:
                log.info("step %d loss %.4f rank %.4f nnz_q %.1f nnz_d %.1f", step, rec["loss"],
                         rec["rank_loss"], rec["nnz_q_mean"], rec["nnz_d_mean"])
            step += 1
    finally:
        if fh:
            fh.close()
    return p, records
