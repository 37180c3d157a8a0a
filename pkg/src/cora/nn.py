"""Shared neural building blocks: multi-head attention and parameter init.

Attention here is the projection-free core (split heads, scaled dot product,
masked softmax, merge heads); each model applies its own Q/K/V/O projections
so that delta-injectable and plain linears can share this code.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, matmul, reshape, softmax, transpose


def init_param(rng, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(shape, std=std), requires_grad=True)


def causal_mask(length: int) -> np.ndarray:
    """Boolean [L, L]; True where position i may attend to position j (j <= i)."""
    return np.tril(np.ones((length, length), dtype=bool))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    return transpose(reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over already-projected [B, L, D] tensors.

    ``mask`` is boolean, broadcastable to [B, H, L_q, L_k], True = may attend.
    Returns (output [B, L_q, D], attention probabilities [B, H, L_q, L_k]).
    """
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    d_head = qh.shape[-1]
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(d_head))
    probs = softmax(scores, axis=-1, mask=mask)
    return merge_heads(matmul(probs, vh)), probs
