"""
Transformer encoder over atoms whose attention is biased by learned
embeddings of bucketed shortest-path distances.

Per head, the score between atoms ``u`` and ``v`` is
``(q_u + c) . k_v + (q_u + d) . r[B(u, v)]``, scaled by ``head_dim ** -0.5``.
The distance table ``r`` and the biases ``c`` and ``d`` are shared by all
layers; value vectors carry no positional term.
"""

from __future__ import annotations

import math

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from g2s import numeric as nm
from g2s.graph_prep import NUM_BUCKETS, Batch
from g2s.layers import FeedForward, LayerNorm, Linear, merge_heads, post_norm, split_heads
from g2s.numeric import ModelParams, Tensor


class GlobalEncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = Field(default=6, ge=0)
    heads: int = Field(default=8, ge=1)
    d_model: int = Field(default=256, ge=1)
    ffn: int = Field(default=2048, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    buckets: int = NUM_BUCKETS
    use_rel_pos: bool = True
    use_global: bool = True

    @field_validator("buckets")
    @classmethod
    def check_buckets(cls, buckets: int) -> int:
        if buckets != NUM_BUCKETS:
            raise ValueError(f"buckets must be {NUM_BUCKETS}, got {buckets}")
        return buckets

    @model_validator(mode="after")
    def check_heads(self) -> GlobalEncoderConfig:
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        return self


class RelPosTable:
    """Distance embeddings ``r`` and the content and position biases."""

    def __init__(self, params: ModelParams, name: str, cfg: GlobalEncoderConfig) -> None:
        depth = cfg.d_model // cfg.heads
        self.heads = cfg.heads
        self.r = params.embedding(f"{name}.r", cfg.buckets, cfg.d_model, cfg.d_model**-0.5)
        self.c = params.bias(f"{name}.c", cfg.heads, depth)
        self.d = params.bias(f"{name}.d", cfg.heads, depth)


class RelAttentionLayer:
    def __init__(self, params: ModelParams, name: str, cfg: GlobalEncoderConfig) -> None:
        self.cfg = cfg
        d = cfg.d_model
        self.query = Linear(params, f"{name}.query", d, d, bias=False)
        self.key = Linear(params, f"{name}.key", d, d, bias=False)
        self.value = Linear(params, f"{name}.value", d, d)
        self.out = Linear(params, f"{name}.out", d, d)
        self.attn_norm = LayerNorm(params, f"{name}.attn_norm", d)
        self.ffn = FeedForward(params, f"{name}.ffn", d, cfg.ffn)
        self.ffn_norm = LayerNorm(params, f"{name}.ffn_norm", d)

    def attention_weights(
        self,
        h: Tensor,
        table: RelPosTable,
        onehot: Tensor,
        mask: npt.NDArray[np.bool_],
    ) -> Tensor:
        """``(B, heads, N, N)`` attention over unmasked atoms."""
        heads = self.cfg.heads
        depth = self.cfg.d_model // heads
        q = split_heads(self.query(h), heads)
        k = split_heads(self.key(h), heads)
        scores = nm.einsum("bhqe,bhke->bhqk", q + table.c.reshape(1, heads, 1, depth), k)
        if self.cfg.use_rel_pos:
            r = table.r.reshape(self.cfg.buckets, heads, depth)
            per_bucket = nm.einsum(
                "bhqe,rhe->bhqr", q + table.d.reshape(1, heads, 1, depth), r
            )
            scores = scores + nm.einsum("bhqr,bqkr->bhqk", per_bucket, onehot)
        return nm.softmax(scores * depth**-0.5, mask[:, None, None, :], axis=-1)

    def rel_attention(
        self,
        h: Tensor,
        table: RelPosTable,
        onehot: Tensor,
        mask: npt.NDArray[np.bool_],
    ) -> Tensor:
        weights = self.attention_weights(h, table, onehot, mask)
        v = split_heads(self.value(h), self.cfg.heads)
        return self.out(merge_heads(nm.einsum("bhqk,bhke->bhqe", weights, v)))

    def __call__(
        self,
        h: Tensor,
        table: RelPosTable,
        onehot: Tensor,
        mask: npt.NDArray[np.bool_],
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        p = self.cfg.dropout
        h = post_norm(self.attn_norm, h, self.rel_attention(h, table, onehot, mask), p, rng)
        return post_norm(self.ffn_norm, h, self.ffn(h, p, rng), p, rng)


class GlobalEncoder:
    def __init__(
        self, params: ModelParams, cfg: GlobalEncoderConfig, name: str = "global"
    ) -> None:
        self.cfg = cfg
        self.table = RelPosTable(params, f"{name}.rel", cfg)
        depth = cfg.layers if cfg.use_global else 0
        self.layers = [
            RelAttentionLayer(params, f"{name}.layers.{i}", cfg) for i in range(depth)
        ]

    def bucket_onehot(self, buckets: npt.NDArray[np.int64], dtype: npt.DTypeLike) -> Tensor:
        return Tensor(np.eye(self.cfg.buckets, dtype=dtype)[buckets])

    def __call__(
        self,
        h_local: Tensor,
        batch: Batch,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """
        Scale packed atom vectors by ``sqrt(d_model)``, lay them out as
        ``(B, N, d_model)`` per reaction and run the attention layers.
        """
        scaled = h_local * math.sqrt(self.cfg.d_model)
        padded = nm.concat(
            [scaled, Tensor(np.zeros((1, self.cfg.d_model), dtype=scaled.dtype))], axis=0
        )
        h = nm.take(padded, batch.atom_index)
        if not self.layers:
            return h
        onehot = self.bucket_onehot(batch.buckets, h.dtype)
        for layer in self.layers:
            h = layer(h, self.table, onehot, batch.atom_mask, rng)
        return h
