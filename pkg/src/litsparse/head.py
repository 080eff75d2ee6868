"""Sparse representation head: log-saturation, pooling and literal residual.

Three modes are supported:

``prosper``
    last-pooled basic weights plus a residual that lifts every literal
    (in-input) term by ``max(w') - w'_j``, where ``w'`` is a projection of
    the last hidden state.
``splade_max``
    max-pooled basic weights, no residual.
``no_lrn``
    last-pooled basic weights, no residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder
from .encoder import EncoderOutput, GradientSet, ModelParams
from .sparse import SparseVec

MODES = ("prosper", "splade_max", "no_lrn")


def saturate(x):
    """``log(1 + max(x, 0))``, elementwise for arrays."""
    return np.log1p(np.maximum(x, 0.0))


def _saturate_grad(x):
    return np.where(x > 0, 1.0 / (1.0 + np.maximum(x, 0.0)), 0.0)


def last_pool(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("last_pool needs at least one row")
    return rows[-1]


def max_pool(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("max_pool needs at least one row")
    return rows.max(axis=0)


def literal_indicator(ids: Sequence[int], vocab_size: int) -> np.ndarray:
    """Sorted distinct in-vocabulary term ids of a sequence (unknown id 0 excluded)."""
    dims = np.unique(np.asarray(ids, dtype=np.int64))
    dims = dims[dims != 0]
    if dims.size and dims[-1] >= vocab_size:
        raise ValueError("literal term id out of range")
    return dims


def lrn_enhance(basic: np.ndarray, enhancement: np.ndarray, lit) -> np.ndarray:
    basic = np.asarray(basic, dtype=np.float64)
    enhancement = np.asarray(enhancement, dtype=np.float64)
    if basic.shape != enhancement.shape:
        raise ValueError(f"length mismatch: {basic.shape} vs {enhancement.shape}")
    lit = np.asarray(sorted(lit), dtype=np.int64)
    out = basic.copy()
    if lit.size:
        out[lit] += enhancement.max() - enhancement[lit]
    return out


@dataclass
class HeadOutput:
    basic: SparseVec
    enhancement: np.ndarray | None
    final: SparseVec


@dataclass
class HeadTrace:
    """Dense head outputs plus everything the backward pass needs."""

    ids: np.ndarray
    mode: str
    enc: EncoderOutput
    basic: np.ndarray
    final: np.ndarray
    enhancement: np.ndarray | None = None
    literal: np.ndarray | None = None
    pooled_hidden: np.ndarray | None = None
    argmax_enh: int = -1
    pool_rows: np.ndarray | None = None  # splade_max: winning row per dim

    def to_output(self) -> HeadOutput:
        return HeadOutput(SparseVec.from_dense(self.basic), self.enhancement, SparseVec.from_dense(self.final))

    def pattern(self) -> bytes:
        """Discrete choices made on the forward pass (ReLU masks, argmaxes)."""
        parts = [np.ascontiguousarray(self.enc.logits > 0).tobytes()]
        if self.mode == "prosper":
            parts.append(np.ascontiguousarray(self.enc.hidden[-1] > 0).tobytes())
            parts.append(int(self.argmax_enh).to_bytes(8, "little", signed=True))
        if self.pool_rows is not None:
            parts.append(self.pool_rows.tobytes())
        return b"".join(parts)


def encode_trace(p: ModelParams, ids: Sequence[int], mode: str = "prosper") -> HeadTrace:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    ids = np.asarray(ids, dtype=np.int64)
    enc = encoder.forward(p, ids)
    if mode == "splade_max":
        sat = saturate(enc.logits)
        # lowest row wins ties so the gradient routing is deterministic
        rows = np.argmax(sat, axis=0)
        basic = sat[rows, np.arange(sat.shape[1])]
        return HeadTrace(ids, mode, enc, basic, basic, pool_rows=rows)
    basic = saturate(last_pool(enc.logits))
    if mode == "no_lrn":
        return HeadTrace(ids, mode, enc, basic, basic)
    pooled = saturate(last_pool(enc.hidden))
    enh = p.lrn_w @ pooled + p.lrn_b
    lit = literal_indicator(ids, p.vocab_size)
    final = lrn_enhance(basic, enh, lit)
    return HeadTrace(ids, mode, enc, basic, final, enhancement=enh, literal=lit,
                     pooled_hidden=pooled, argmax_enh=int(np.argmax(enh)))


def encode(p: ModelParams, ids: Sequence[int], mode: str = "prosper") -> HeadOutput:
    return encode_trace(p, ids, mode).to_output()


def head_backward(
    p: ModelParams,
    trace: HeadTrace,
    d_final: np.ndarray | None,
    d_basic: np.ndarray | None = None,
    grads: GradientSet | None = None,
) -> GradientSet:
    """Backpropagate loss gradients on ``final`` and ``basic`` into ``grads``.

    In the residual the max over ``w'`` routes its gradient to the lowest
    arg-max id.
    """
    if grads is None:
        grads = p.zeros_like()
    V = p.vocab_size
    d_final = np.zeros(V) if d_final is None else np.asarray(d_final, dtype=np.float64)
    g_basic = d_final.copy()
    if d_basic is not None:
        g_basic += d_basic

    n = trace.enc.logits.shape[0]
    d_logits = np.zeros((n, V))
    d_hidden = None
    if trace.mode == "splade_max":
        pre = trace.enc.logits[trace.pool_rows, np.arange(V)]
        d_logits[trace.pool_rows, np.arange(V)] = g_basic * _saturate_grad(pre)
    else:
        d_logits[-1] = g_basic * _saturate_grad(trace.enc.logits[-1])

    if trace.mode == "prosper" and trace.literal.size:
        lit = trace.literal
        d_enh = np.zeros(V)
        d_enh[lit] -= d_final[lit]
        d_enh[trace.argmax_enh] += d_final[lit].sum()
        touched = np.flatnonzero(d_enh)
        grads.lrn_w[touched] += np.outer(d_enh[touched], trace.pooled_hidden)
        grads.lrn_b += d_enh
        d_pooled = p.lrn_w.T @ d_enh
        d_hidden = np.zeros_like(trace.enc.hidden)
        d_hidden[-1] = d_pooled * _saturate_grad(trace.enc.hidden[-1])

    return encoder.backward(p, trace.ids, d_hidden=d_hidden, d_logits=d_logits, out=trace.enc, grads=grads)
