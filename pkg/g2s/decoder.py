"""
Autoregressive SMILES decoder: token vocabulary, Transformer decoder layers
with clipped relative positions on keys and values, and incremental
decoding state for search.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from g2s import numeric as nm
from g2s.layers import FeedForward, LayerNorm, Linear, merge_heads, post_norm, split_heads
from g2s.numeric import ModelParams, Tensor


logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class PrefixTooLong(ValueError):
    def __init__(self, length: int, max_len: int) -> None:
        super().__init__(f"prefix of {length} tokens exceeds max_len={max_len}")
        self.length = length
        self.max_len = max_len


class Vocab:
    """Dense token ids; the four special tokens take ids 0 to 3."""

    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        if any("\n" in token or not token for token in tokens):
            raise ValueError("vocabulary tokens must be non-empty and single-line")
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]]) -> Vocab:
        """Order tokens by frequency; ties keep first-occurrence order."""
        counts: Counter[str] = Counter()
        for sequence in sequences:
            counts.update(sequence)
        ordered = sorted(counts, key=lambda token: -counts[token])
        return cls(list(SPECIAL_TOKENS) + [t for t in ordered if t not in SPECIAL_TOKENS])

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> npt.NDArray[np.int64]:
        ids = [self.index.get(token, UNK) for token in tokens]
        if add_eos:
            ids.append(EOS)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids to tokens, stopping at EOS and skipping other specials."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i >= len(SPECIAL_TOKENS):
                out.append(self.tokens[i])
        return out

    def save(self, path: Path) -> None:
        text = "".join(f"{token}\n" for token in self.tokens)
        path.write_text(text, encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: Path) -> Vocab:
        """Read one token per line; only ``\\n`` separates tokens."""
        tokens = path.read_bytes().decode("utf-8").split("\n")
        if tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


class DecoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = Field(default=6, ge=1)
    heads: int = Field(default=8, ge=1)
    d_model: int = Field(default=256, ge=1)
    ffn: int = Field(default=2048, ge=1)
    max_rel_pos: int = Field(default=4, ge=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_len: int = Field(default=512, ge=1)

    @model_validator(mode="after")
    def check_heads(self) -> DecoderConfig:
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        return self


class LayerCache(NamedTuple):
    """Keys and values seen so far by one layer, ``(B, heads, L, head_dim)``."""

    self_k: Tensor
    self_v: Tensor
    cross_k: Tensor
    cross_v: Tensor


class DecoderState(NamedTuple):
    memory_mask: npt.NDArray[np.bool_]
    caches: tuple[LayerCache, ...]
    length: int

    def select(self, rows: npt.ArrayLike) -> DecoderState:
        """Reorder or repeat batch rows, e.g. to follow surviving beams."""
        index = np.asarray(rows, dtype=np.int64)
        return DecoderState(
            memory_mask=self.memory_mask[index],
            caches=tuple(
                LayerCache(*(Tensor(t.data[index]) for t in cache)) for cache in self.caches
            ),
            length=self.length,
        )


def relative_positions(
    query_positions: npt.NDArray[np.int64],
    key_positions: npt.NDArray[np.int64],
    max_rel_pos: int,
) -> npt.NDArray[np.int64]:
    """Table index ``clip(j - i, -max, max) + max`` for each query/key pair."""
    distance = key_positions[None, :] - query_positions[:, None]
    return np.clip(distance, -max_rel_pos, max_rel_pos) + max_rel_pos


class DecoderLayer:
    def __init__(self, params: ModelParams, name: str, cfg: DecoderConfig) -> None:
        self.cfg = cfg
        d = cfg.d_model
        depth = d // cfg.heads
        span = 2 * cfg.max_rel_pos + 1
        self.self_query = Linear(params, f"{name}.self_query", d, d, bias=False)
        self.self_key = Linear(params, f"{name}.self_key", d, d, bias=False)
        self.self_value = Linear(params, f"{name}.self_value", d, d)
        self.self_out = Linear(params, f"{name}.self_out", d, d)
        self.rel_k = params.embedding(f"{name}.rel_k", span, depth, depth**-0.5)
        self.rel_v = params.embedding(f"{name}.rel_v", span, depth, depth**-0.5)
        self.self_norm = LayerNorm(params, f"{name}.self_norm", d)
        self.cross_query = Linear(params, f"{name}.cross_query", d, d, bias=False)
        self.cross_key = Linear(params, f"{name}.cross_key", d, d, bias=False)
        self.cross_value = Linear(params, f"{name}.cross_value", d, d)
        self.cross_out = Linear(params, f"{name}.cross_out", d, d)
        self.cross_norm = LayerNorm(params, f"{name}.cross_norm", d)
        self.ffn = FeedForward(params, f"{name}.ffn", d, cfg.ffn)
        self.ffn_norm = LayerNorm(params, f"{name}.ffn_norm", d)

    def memory_kv(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        heads = self.cfg.heads
        return (
            split_heads(self.cross_key(memory), heads),
            split_heads(self.cross_value(memory), heads),
        )

    def self_attention(
        self,
        x: Tensor,
        past: tuple[Tensor, Tensor] | None,
        offset: int,
    ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        heads = self.cfg.heads
        depth = self.cfg.d_model // heads
        q = split_heads(self.self_query(x), heads)
        k = split_heads(self.self_key(x), heads)
        v = split_heads(self.self_value(x), heads)
        if past is not None:
            k = nm.concat([past[0], k], axis=2)
            v = nm.concat([past[1], v], axis=2)
        query_pos = np.arange(offset, offset + x.shape[1])
        key_pos = np.arange(k.shape[2])
        rel = relative_positions(query_pos, key_pos, self.cfg.max_rel_pos)
        causal = key_pos[None, :] <= query_pos[:, None]
        scores = nm.einsum("bhqe,bhke->bhqk", q, k) + nm.einsum(
            "bhqe,qke->bhqk", q, nm.take(self.rel_k, rel)
        )
        weights = nm.softmax(scores * depth**-0.5, causal[None, None], axis=-1)
        mixed = nm.einsum("bhqk,bhke->bhqe", weights, v) + nm.einsum(
            "bhqk,qke->bhqe", weights, nm.take(self.rel_v, rel)
        )
        return self.self_out(merge_heads(mixed)), (k, v)

    def cross_attention(
        self,
        x: Tensor,
        memory_kv: tuple[Tensor, Tensor],
        memory_mask: npt.NDArray[np.bool_],
    ) -> Tensor:
        heads = self.cfg.heads
        depth = self.cfg.d_model // heads
        q = split_heads(self.cross_query(x), heads)
        scores = nm.einsum("bhqe,bhke->bhqk", q, memory_kv[0])
        weights = nm.softmax(scores * depth**-0.5, memory_mask[:, None, None, :], axis=-1)
        return self.cross_out(merge_heads(nm.einsum("bhqk,bhke->bhqe", weights, memory_kv[1])))

    def __call__(
        self,
        x: Tensor,
        memory_kv: tuple[Tensor, Tensor],
        memory_mask: npt.NDArray[np.bool_],
        past: tuple[Tensor, Tensor] | None = None,
        offset: int = 0,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        p = self.cfg.dropout
        attended, kv = self.self_attention(x, past, offset)
        x = post_norm(self.self_norm, x, attended, p, rng)
        x = post_norm(self.cross_norm, x, self.cross_attention(x, memory_kv, memory_mask), p, rng)
        return post_norm(self.ffn_norm, x, self.ffn(x, p, rng), p, rng), kv


class Decoder:
    def __init__(
        self,
        params: ModelParams,
        cfg: DecoderConfig,
        vocab_size: int,
        name: str = "decoder",
    ) -> None:
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embedding = params.embedding(
            f"{name}.embedding", vocab_size, cfg.d_model, cfg.d_model**-0.5
        )
        self.layers = [DecoderLayer(params, f"{name}.layers.{i}", cfg) for i in range(cfg.layers)]
        self.output = Linear(params, f"{name}.output", cfg.d_model, vocab_size)

    def embed(self, ids: npt.ArrayLike) -> Tensor:
        return nm.take(self.embedding, ids) * math.sqrt(self.cfg.d_model)

    def forward(
        self,
        memory: Tensor,
        memory_mask: npt.NDArray[np.bool_],
        inputs: npt.NDArray[np.int64],
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits ``(B, L, V)`` for every position of a teacher-forced input."""
        if inputs.shape[1] > self.cfg.max_len:
            raise PrefixTooLong(inputs.shape[1], self.cfg.max_len)
        x = nm.dropout(self.embed(inputs), self.cfg.dropout, rng)
        for layer in self.layers:
            x, _ = layer(x, layer.memory_kv(memory), memory_mask, rng=rng)
        return self.output(x)

    def train_forward(
        self,
        memory: Tensor,
        memory_mask: npt.NDArray[np.bool_],
        tgt_ids: npt.NDArray[np.int64],
        tgt_mask: npt.NDArray[np.bool_],
        label_smoothing: float = 0.0,
        rng: np.random.Generator | None = None,
        reduction: str = "mean",
    ) -> Tensor:
        """Cross entropy of ``tgt_ids`` given the shifted-right inputs."""
        inputs = np.concatenate(
            [np.full((len(tgt_ids), 1), BOS, dtype=np.int64), tgt_ids[:, :-1]], axis=1
        )
        logits = self.forward(memory, memory_mask, inputs, rng)
        return nm.cross_entropy(logits, tgt_ids, tgt_mask, label_smoothing, reduction)

    def decode_step(
        self,
        memory: Tensor,
        memory_mask: npt.NDArray[np.bool_],
        prefix: npt.NDArray[np.int64],
    ) -> Tensor:
        """
        Next-token logits ``(B, V)`` from a full prefix starting with BOS.

        :raises PrefixTooLong: if the prefix is longer than ``max_len``
        """
        if prefix.ndim != 2 or prefix.shape[1] == 0 or np.any(prefix[:, 0] != BOS):
            raise ValueError("prefix must be a (B, L) id array starting with BOS")
        return self.forward(memory, memory_mask, prefix)[:, -1]

    def start(self, memory: Tensor, memory_mask: npt.NDArray[np.bool_]) -> DecoderState:
        """Prepare an empty incremental state for ``step``."""
        batch = memory.shape[0]
        heads = self.cfg.heads
        empty = np.zeros((batch, heads, 0, self.cfg.d_model // heads), dtype=memory.dtype)
        caches = []
        for layer in self.layers:
            cross_k, cross_v = layer.memory_kv(memory)
            caches.append(LayerCache(Tensor(empty), Tensor(empty), cross_k, cross_v))
        return DecoderState(memory_mask, tuple(caches), 0)

    def step(
        self, state: DecoderState, tokens: npt.ArrayLike
    ) -> tuple[Tensor, DecoderState]:
        """Feed one token per row; return next-token logits and the new state."""
        if state.length + 1 > self.cfg.max_len:
            raise PrefixTooLong(state.length + 1, self.cfg.max_len)
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        x = self.embed(ids)
        caches = []
        for layer, cache in zip(self.layers, state.caches):
            x, (k, v) = layer(
                x,
                (cache.cross_k, cache.cross_v),
                state.memory_mask,
                past=(cache.self_k, cache.self_v),
                offset=state.length,
            )
            caches.append(LayerCache(k, v, cache.cross_k, cache.cross_v))
        logits = self.output(x)[:, -1]
        return logits, DecoderState(state.memory_mask, tuple(caches), state.length + 1)
