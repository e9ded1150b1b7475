"""Parameterized building blocks shared by the encoders and the decoder."""

from __future__ import annotations

import numpy as np

from g2s import numeric as nm
from g2s.numeric import ModelParams, Tensor


class Linear:
    def __init__(
        self,
        params: ModelParams,
        name: str,
        fan_in: int,
        fan_out: int,
        bias: bool = True,
    ) -> None:
        self.weight = params.matrix(f"{name}.weight", fan_in, fan_out)
        self.bias = params.bias(f"{name}.bias", fan_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm:
    def __init__(self, params: ModelParams, name: str, dim: int) -> None:
        self.gamma = params.ones(f"{name}.gamma", dim)
        self.beta = params.bias(f"{name}.beta", dim)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    """Position-wise ``W2 GELU(W1 x)``."""

    def __init__(self, params: ModelParams, name: str, d_model: int, ffn: int) -> None:
        self.inner = Linear(params, f"{name}.inner", d_model, ffn)
        self.outer = Linear(params, f"{name}.outer", ffn, d_model)

    def __call__(
        self, x: Tensor, p: float = 0.0, rng: np.random.Generator | None = None
    ) -> Tensor:
        return self.outer(nm.dropout(nm.gelu(self.inner(x)), p, rng))


def post_norm(
    norm: LayerNorm,
    x: Tensor,
    sublayer_out: Tensor,
    p: float,
    rng: np.random.Generator | None,
) -> Tensor:
    """Residual connection followed by layer normalization."""
    return norm(x + nm.dropout(sublayer_out, p, rng))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(B, L, H*D)`` to ``(B, H, L, D)``."""
    batch, length, width = x.shape
    return x.reshape(batch, length, heads, width // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """``(B, H, L, D)`` to ``(B, L, H*D)``."""
    batch, heads, length, depth = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * depth)
