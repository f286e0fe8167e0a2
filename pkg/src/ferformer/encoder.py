"""Transformer encoder over [class; steering; patch tokens].

Attention is full and unmasked: the steering token attends to, and is
attended by, every other token in every block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module, dropout, param, trunc_normal
from .tensor import Tensor

CLASS_ROW, STEER_ROW = 0, 1


@dataclass
class TokenSequence:
    Z: Tensor  # (..., n, D)

    @property
    def n(self) -> int:
        return self.Z.shape[-2]


def make_sequence(patch_tokens: Tensor, class_token: Tensor, steering_token: Tensor,
                  positional: Tensor) -> TokenSequence:
    """Assemble Z = [X_c; X_s; X_p] and add the positional table."""
    N, D = patch_tokens.shape[-2:]
    if positional.shape != (N + 2, D):
        raise ShapeError(f"positional table {positional.shape} does not fit {N} patches (+2) of width {D}")
    lead = patch_tokens.shape[:-2]
    cls = T.reshape(class_token, (1, D))
    steer = T.reshape(steering_token, (1, D))
    if lead:
        cls, steer = T.expand(cls, lead), T.expand(steer, lead)
    Z = T.concat([cls, steer, patch_tokens], axis=-2)
    return TokenSequence(Z + positional)


class MultiHeadAttention(Module):
    """[q, k, v] = Z [W_q, W_k, W_v]; heads split the D columns evenly."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"heads={heads} must divide dim={dim}")
        self.wq = param(_xavier(rng, dim))
        self.wk = param(_xavier(rng, dim))
        self.wv = param(_xavier(rng, dim))
        self.out = Linear(dim, dim, rng)
        self._heads = heads
        self._record = False
        self.last_weights: np.ndarray | None = None

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self._heads

    def _split(self, x: Tensor) -> Tensor:
        # (..., n, D) -> (..., h, n, d)
        lead, n = x.shape[:-2], x.shape[-2]
        x = T.reshape(x, lead + (n, self._heads, self.head_dim))
        k = len(lead)
        return T.permute(x, tuple(range(k)) + (k + 1, k, k + 2))

    def attend(self, x: Tensor) -> Tensor:
        """Per-head outputs b_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j, shape (..., h, n, d)."""
        q, k, v = (self._split(T.matmul(x, w)) for w in (self.wq, self.wk, self.wv))
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(self.head_dim))
        weights = T.softmax(scores, axis=-1)
        if self._record:
            self.last_weights = weights.data.copy()
        return T.matmul(weights, v)

    def forward(self, x: Tensor) -> Tensor:
        b = self.attend(x)
        k = b.ndim - 3
        merged = T.permute(b, tuple(range(k)) + (k + 1, k, k + 2))
        lead, n = merged.shape[:-3], merged.shape[-3]
        return self.out(T.reshape(merged, lead + (n, self.wq.shape[1])))


def _xavier(rng, dim):
    bound = math.sqrt(6.0 / (2 * dim))
    return rng.uniform(-bound, bound, size=(dim, dim))


def attention(Z: Tensor, mhsa: MultiHeadAttention, head: int) -> Tensor:
    """Output rows of one attention head, shape (n, d_v)."""
    if not 0 <= head < mhsa.heads:
        raise IndexError(f"head {head} out of range for {mhsa.heads} heads")
    return mhsa.attend(Z)[..., head, :, :]


class EncoderBlock(Module):
    """Pre-norm residual block: Z + MHSA(LN(Z)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, drop: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)
        self._drop = drop

    def forward(self, Z: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        Z = Z + dropout(self.attn(self.norm1(Z)), self._drop, rng)
        return Z + dropout(self.mlp(self.norm2(Z)), self._drop, rng)


def encoder_block(Z: Tensor, block: EncoderBlock) -> Tensor:
    return block(Z)


class HybridEncoder(Module):
    def __init__(self, num_patches: int, dim: int, depth: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator, drop: float = 0.0):
        if depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {depth}")
        self.class_token = param(trunc_normal(rng, (1, dim)))
        self.steering_token = param(trunc_normal(rng, (1, dim)))
        self.pos = param(trunc_normal(rng, (num_patches + 2, dim)))
        self.blocks = [EncoderBlock(dim, heads, mlp_ratio, rng, drop) for _ in range(depth)]

    def record_attention(self, on: bool = True) -> None:
        for b in self.blocks:
            b.attn._record = on
            b.attn.last_weights = None

    def attention_weights(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]

    def sequence(self, patch_tokens: Tensor) -> TokenSequence:
        return make_sequence(patch_tokens, self.class_token, self.steering_token, self.pos)

    def forward(self, patch_tokens: Tensor, rng=None) -> tuple[Tensor, Tensor, Tensor]:
        return encoder_forward(self.sequence(patch_tokens).Z, self, rng=rng)


def encoder_forward(Z: Tensor, enc: HybridEncoder, depth: int | None = None, rng=None):
    """Run ``depth`` blocks (all by default); returns (I_C, I_S, final Z).

    I_C and I_S are rows 1 and 2 of the last block's output.
    """
    depth = len(enc.blocks) if depth is None else depth
    if not 1 <= depth <= len(enc.blocks):
        raise ConfigError(f"depth must lie in [1, {len(enc.blocks)}], got {depth}")
    for block in enc.blocks[:depth]:
        Z = block(Z, rng)
    return Z[..., CLASS_ROW, :], Z[..., STEER_ROW, :], Z
