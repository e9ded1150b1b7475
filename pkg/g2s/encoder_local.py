"""
Directed message passing over bonds with attention (D-GAT) or plain sum
(D-GCN) aggregation, followed by an atom-level readout.
"""

from __future__ import annotations

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from g2s import numeric as nm
from g2s.graph_prep import ATOM_FDIM, BOND_FDIM, Batch
from g2s.layers import Linear
from g2s.numeric import ModelParams, Tensor


LEAKY_SLOPE = 0.2


class Variant(StrEnum):
    DGAT = "D-GAT"
    DGCN = "D-GCN"


class DmpnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden: int = Field(default=256, ge=1)
    steps: int = Field(default=4, ge=1)
    heads: int = Field(default=8, ge=1)
    variant: Variant = Variant.DGAT
    attn_dropout: float = Field(default=0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_heads(self) -> DmpnnConfig:
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        return self


class AttnSum:
    """
    Aggregate a padded set of incoming messages per row.

    Scores are ``a . LeakyReLU(W_qk [context; m] + b_qk)`` per head, softmaxed
    over the set; the result is the weighted sum of ``W_v m + b_v``. The
    D-GCN variant sums the value projections instead. An empty set gives 0.
    """

    def __init__(
        self,
        params: ModelParams,
        name: str,
        context_dim: int,
        hidden: int,
        heads: int,
        variant: Variant = Variant.DGAT,
        attn_dropout: float = 0.0,
    ) -> None:
        self.context_dim = context_dim
        self.hidden = hidden
        self.heads = heads
        self.variant = variant
        self.attn_dropout = attn_dropout
        if variant is Variant.DGAT:
            self.w_qk = params.matrix(f"{name}.w_qk", context_dim + hidden, hidden)
            self.b_qk = params.bias(f"{name}.b_qk", hidden)
            self.a = params.matrix(f"{name}.a", heads, hidden // heads, fan_in=hidden // heads)
        self.value = Linear(params, f"{name}.value", hidden, hidden)

    def weights(
        self,
        context: Tensor,
        messages: Tensor,
        index: np.ndarray,
        mask: np.ndarray,
    ) -> Tensor:
        """Attention weights ``(rows, set size, heads)``; masked slots are 0."""
        rows, width = index.shape
        depth = self.hidden // self.heads
        query = context @ self.w_qk[: self.context_dim]
        keys = nm.take(messages @ self.w_qk[self.context_dim :], index)
        hidden = nm.leaky_relu(
            query.reshape(rows, 1, self.hidden) + keys + self.b_qk, LEAKY_SLOPE
        )
        scores = nm.einsum(
            "rkhe,he->rkh", hidden.reshape(rows, width, self.heads, depth), self.a
        )
        return nm.softmax(scores, mask[:, :, None], axis=1)

    def __call__(
        self,
        context: Tensor,
        messages: Tensor,
        index: np.ndarray,
        mask: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """
        :param context: ``(rows, context_dim)``
        :param messages: ``(M + 1, hidden)``; the last row is the zero pad
        :param index: ``(rows, K)`` indices into ``messages``
        :param mask: ``(rows, K)``, true for real set members
        """
        rows, width = index.shape
        values = nm.take(self.value(messages), index)
        if self.variant is Variant.DGCN:
            return (values * mask[:, :, None].astype(values.dtype)).sum(axis=1)
        depth = self.hidden // self.heads
        weights = nm.dropout(
            self.weights(context, messages, index, mask), self.attn_dropout, rng
        )
        mixed = nm.einsum(
            "rkh,rkhe->rhe", weights, values.reshape(rows, width, self.heads, depth)
        )
        return mixed.reshape(rows, self.hidden)


class LocalEncoder:
    """Bond-level GRU message passing, then per-atom readout to ``hidden``."""

    def __init__(
        self,
        params: ModelParams,
        cfg: DmpnnConfig,
        name: str = "local",
        atom_dim: int = ATOM_FDIM,
        bond_dim: int = BOND_FDIM,
    ) -> None:
        self.cfg = cfg
        d, pair = cfg.hidden, atom_dim + bond_dim
        self.init = Linear(params, f"{name}.init", pair, d)
        self.aggregate = AttnSum(
            params, f"{name}.attn", pair, d, cfg.heads, cfg.variant, cfg.attn_dropout
        )
        self.w_z = Linear(params, f"{name}.w_z", pair + d, d)
        self.w_r = Linear(params, f"{name}.w_r", pair + d, d)
        self.w = Linear(params, f"{name}.w", pair, d)
        self.u = Linear(params, f"{name}.u", d, d, bias=False)
        self.readout_attn = AttnSum(
            params, f"{name}.readout_attn", atom_dim, d, cfg.heads, cfg.variant, cfg.attn_dropout
        )
        self.w_o = Linear(params, f"{name}.w_o", atom_dim + d, d, bias=False)

    def gru_step(self, pair: Tensor, s: Tensor) -> Tensor:
        """One gated update from ``[x_u; x_uv]`` and the aggregated ``s_uv``."""
        gate_in = nm.concat([pair, s])
        z = nm.sigmoid(self.w_z(gate_in))
        r = nm.sigmoid(self.w_r(gate_in))
        candidate = nm.tanh(self.w(pair) + self.u(r))
        return (1.0 - z) * s + z * candidate

    def readout(
        self,
        atoms: Tensor,
        messages: Tensor,
        batch: Batch,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        padded = nm.concat([messages, _zeros(1, self.cfg.hidden, messages)], axis=0)
        m_u = self.readout_attn(
            atoms, padded, batch.atom_incoming, batch.atom_incoming_mask, rng
        )
        return nm.gelu(self.w_o(nm.concat([atoms, m_u])))

    def __call__(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        """Return ``(num_atoms, hidden)`` atom vectors for a packed batch."""
        dtype = self.w.weight.dtype
        atoms = Tensor(batch.atom_feats.astype(dtype))
        pair = nm.concat(
            [nm.take(atoms, batch.bond_src), Tensor(batch.bond_feats.astype(dtype))]
        )
        messages = nm.tanh(self.init(pair))
        for _ in range(self.cfg.steps):
            padded = nm.concat([messages, _zeros(1, self.cfg.hidden, messages)], axis=0)
            s = self.aggregate(pair, padded, batch.incoming, batch.incoming_mask, rng)
            messages = self.gru_step(pair, s)
        return self.readout(atoms, messages, batch, rng)


def _zeros(rows: int, cols: int, like: Tensor) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=like.dtype))
