"""Toy causal encoder: prefix-mean of embeddings, tanh affine, vocabulary head.

Position ``i`` only sees tokens ``0..i``, so the last position summarises the
whole sequence the way a causal language model's final state does.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"PRSP"
FORMAT_VERSION = 1


@dataclass
class ModelParams:
    emb: np.ndarray     # |V| x H
    mix_w: np.ndarray   # H x H
    mix_b: np.ndarray   # H
    head: np.ndarray    # |V| x H
    head_b: np.ndarray  # |V|
    lrn_w: np.ndarray   # |V| x H
    lrn_b: np.ndarray   # |V|

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def hidden(self) -> int:
        return self.emb.shape[1]

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def copy(self) -> ModelParams:
        return ModelParams(**{k: v.copy() for k, v in self.tensors()})

    def zeros_like(self) -> ModelParams:
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.tensors()})

    def add_(self, other: ModelParams) -> ModelParams:
        for k, v in self.tensors():
            v += getattr(other, k)
        return self

    def validate(self) -> None:
        V, H = self.emb.shape
        expected = {
            "emb": (V, H), "mix_w": (H, H), "mix_b": (H,), "head": (V, H),
            "head_b": (V,), "lrn_w": (V, H), "lrn_b": (V,),
        }
        if H < 2:
            raise ValueError("hidden size must be >= 2")
        for name, arr in self.tensors():
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


# Gradients share the parameter layout.
GradientSet = ModelParams


def init_params(vocab_size: int, hidden: int = 32, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases."""
    if hidden < 2 or vocab_size < 2:
        raise ValueError("need hidden >= 2 and vocab_size >= 2")
    rng = np.random.default_rng(seed)
    r = 1.0 / np.sqrt(hidden)

    def u(*shape):
        return rng.uniform(-r, r, size=shape)

    return ModelParams(
        emb=u(vocab_size, hidden),
        mix_w=u(hidden, hidden),
        mix_b=np.zeros(hidden),
        head=u(vocab_size, hidden),
        head_b=np.zeros(vocab_size),
        lrn_w=u(vocab_size, hidden),
        lrn_b=np.zeros(vocab_size),
    )


@dataclass
class EncoderOutput:
    hidden: np.ndarray  # N x H
    logits: np.ndarray  # N x |V|
    prefix_mean: np.ndarray  # N x H, kept for the backward pass


def _check_ids(p: ModelParams, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be a non-empty 1-d sequence")
    if ids.min() < 0 or ids.max() >= p.vocab_size:
        raise ValueError(f"token id out of range for vocabulary of size {p.vocab_size}")
    return ids


def forward(p: ModelParams, ids: Sequence[int]) -> EncoderOutput:
    ids = _check_ids(p, ids)
    counts = np.arange(1, ids.size + 1, dtype=np.float64)[:, None]
    m = np.cumsum(p.emb[ids], axis=0) / counts
    h = np.tanh(m @ p.mix_w.T + p.mix_b)
    logits = h @ p.head.T + p.head_b
    return EncoderOutput(hidden=h, logits=logits, prefix_mean=m)


def backward(
    p: ModelParams,
    ids: Sequence[int],
    d_hidden: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
    out: EncoderOutput | None = None,
    grads: GradientSet | None = None,
) -> GradientSet:
    """Accumulate gradients of a scalar loss into ``grads``.

    ``d_hidden`` (N x H) and ``d_logits`` (N x |V|) are the loss gradients
    with respect to the encoder outputs; either may be omitted when zero.
    Rows of ``d_logits`` that are entirely zero are skipped. Pass the
    cached ``out`` of :func:`forward` to avoid recomputing it.
    """
    ids = _check_ids(p, ids)
    if out is None:
        out = forward(p, ids)
    n, H = out.hidden.shape
    if grads is None:
        grads = p.zeros_like()
    dh = np.zeros((n, H)) if d_hidden is None else np.array(d_hidden, dtype=np.float64)
    if dh.shape != (n, H):
        raise ValueError(f"d_hidden shape {dh.shape} does not match {(n, H)}")
    if not np.all(np.isfinite(dh)):
        raise ValueError("non-finite upstream gradient")

    if d_logits is not None:
        if d_logits.shape != (n, p.vocab_size):
            raise ValueError(f"d_logits shape {d_logits.shape} does not match {(n, p.vocab_size)}")
        if not np.all(np.isfinite(d_logits)):
            raise ValueError("non-finite upstream gradient")
        rows = np.flatnonzero(np.any(d_logits != 0, axis=1))
        if rows.size:
            g = d_logits[rows]
            grads.head += g.T @ out.hidden[rows]
            grads.head_b += g.sum(axis=0)
            dh[rows] += g @ p.head

    dz = dh * (1.0 - out.hidden ** 2)
    grads.mix_w += dz.T @ out.prefix_mean
    grads.mix_b += dz.sum(axis=0)
    dm = dz @ p.mix_w
    # m_i = mean(e_0..e_i): token j receives sum_{i >= j} dm_i / (i + 1)
    scaled = dm / np.arange(1, n + 1, dtype=np.float64)[:, None]
    d_emb_rows = np.cumsum(scaled[::-1], axis=0)[::-1]
    np.add.at(grads.emb, ids, d_emb_rows)
    return grads


def save_model(p: ModelParams, path: str | Path) -> None:
    """Little-endian: magic, version, |V|, H, then length-prefixed f32 tensors."""
    p.validate()
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, p.vocab_size, p.hidden)]
    for _, arr in p.tensors():
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"model file truncated at offset {len(data)} (header needs 16 bytes)")
    if data[:4] != MAGIC:
        raise ValueError("bad magic at offset 0")
    version, V, H = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version} at offset 4")
    shapes = {
        "emb": (V, H), "mix_w": (H, H), "mix_b": (H,), "head": (V, H),
        "head_b": (V,), "lrn_w": (V, H), "lrn_b": (V,),
    }
    pos = 16
    tensors = {}
    for f in fields(ModelParams):
        shape = shapes[f.name]
        if pos + 8 > len(data):
            raise ValueError(f"model file truncated at offset {pos} (length of {f.name})")
        (length,) = struct.unpack_from("<Q", data, pos)
        if length != int(np.prod(shape)):
            raise ValueError(f"tensor {f.name} length {length} at offset {pos} does not match shape {shape}")
        pos += 8
        end = pos + 4 * length
        if end > len(data):
            raise ValueError(f"model file truncated at offset {len(data)} inside {f.name} (needs {end})")
        tensors[f.name] = np.frombuffer(data, dtype="<f4", count=length, offset=pos).astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise ValueError(f"trailing bytes at offset {pos}")
    p = ModelParams(**tensors)
    p.validate()
    return p
