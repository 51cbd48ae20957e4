"""Scaled dot-product and multi-head attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9


class AttentionError(ValueError):
    pass


@dataclass
class MultiHeadParams:
    """Bias-free projections for ``n_heads`` attention heads.

    ``w_o`` may be ``None`` for the CAMO refinement steps, whose formula
    concatenates the heads without an output projection.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int, out_proj: bool = True) -> "MultiHeadParams":
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        mats = [T.tensor(xavier(rng, d_model, d_model), requires_grad=True) for _ in range(4 if out_proj else 3)]
        return cls(mats[0], mats[1], mats[2], mats[3] if out_proj else None, n_heads)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular boolean mask; ``True`` means attention is allowed."""
    return np.tril(np.ones((n, n), dtype=bool))


def _check_mask(mask: np.ndarray, tq: int, tk: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (tq, tk):
        raise AttentionError(f"mask shape {mask.shape} does not match scores [{tq}x{tk}]")
    if not mask.any(axis=1).all():
        raise AttentionError("a query row is fully masked")
    return mask


def sdp_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over the two trailing axes.

    Works on ``[T, d]`` operands or head-batched ``[h, T, d]`` operands; the
    boolean mask is ``[T_q, T_k]`` and shared by all heads.
    """
    if q.shape[-1] != k.shape[-1]:
        raise AttentionError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise AttentionError(f"key/value lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        m = _check_mask(mask, q.shape[-2], k.shape[-2])
        additive = np.broadcast_to(np.where(m, 0.0, MASK_VALUE), scores.shape)
        scores = T.add(scores, T.tensor(additive))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, d = x.shape
    return T.transpose(T.reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, t, dk = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (t, h * dk))


def multi_head(x_q: Tensor, x_kv: Tensor, p: MultiHeadParams, mask=None, return_weights: bool = False):
    """Project, attend per head, concatenate, then apply ``w_o`` if present.

    With ``return_weights`` the per-head attention weights ``[h, T_q, T_k]``
    are returned as a numpy array alongside the output.
    """
    d_model = p.d_model
    if d_model % p.n_heads:
        raise ValueError(f"d_model={d_model} is not divisible by n_heads={p.n_heads}")
    if x_q.shape[-1] != d_model or x_kv.shape[-1] != d_model:
        raise AttentionError(f"inputs must have {d_model} columns, got {x_q.shape} and {x_kv.shape}")
    q = split_heads(T.matmul(x_q, p.w_q), p.n_heads)
    k = split_heads(T.matmul(x_kv, p.w_k), p.n_heads)
    v = split_heads(T.matmul(x_kv, p.w_v), p.n_heads)
    heads, weights = sdp_attention(q, k, v, mask, return_weights=True)
    out = merge_heads(heads)
    if p.w_o is not None:
        out = T.matmul(out, p.w_o)
    if return_weights:
        return out, weights.numpy()
    return out


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
