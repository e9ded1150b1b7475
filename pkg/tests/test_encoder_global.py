from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError

from g2s.chem_parse import parse, permute
from g2s.decoder import Vocab
from g2s.encoder_global import GlobalEncoder, GlobalEncoderConfig, RelAttentionLayer, RelPosTable
from g2s.graph_prep import Example, collate, featurize
from g2s.model import Graph2Seq
from g2s.numeric import ModelParams, Tensor
from tests.conftest import graph_batch, random_graphs, small_config


def config(**overrides: object) -> GlobalEncoderConfig:
    values: dict[str, object] = {"layers": 2, "heads": 2, "d_model": 8, "ffn": 16, "dropout": 0.0}
    return GlobalEncoderConfig.model_validate({**values, **overrides})


def test_config_validation() -> None:
    with pytest.raises(ValidationError):
        config(buckets=12)
    with pytest.raises(ValidationError):
        config(heads=3)
    with pytest.raises(ValidationError):
        config(layers=-1)


@pytest.mark.parametrize("overrides", [{"layers": 0}, {"use_global": False}])
def test_without_layers_returns_scaled_local_vectors(overrides: dict[str, object]) -> None:
    enc = GlobalEncoder(ModelParams(), config(**overrides))
    batch = collate(
        [
            Example(featurize(parse("CCO")), 3, np.zeros(0, dtype=np.int64)),
            Example(featurize(parse("N")), 1, np.zeros(0, dtype=np.int64)),
        ]
    )
    h_local = np.random.default_rng(0).normal(size=(4, 8))
    out = enc(Tensor(h_local), batch).data
    assert out.shape == (2, 3, 8)
    assert np.allclose(out[0], h_local[:3] * math.sqrt(8))
    assert np.allclose(out[1, 0], h_local[3] * math.sqrt(8))
    assert not out[1, 1:].any()


def test_no_global_registers_no_layers() -> None:
    params = ModelParams()
    GlobalEncoder(params, config(use_global=False))
    assert [p.name for p in params] == ["global.rel.r", "global.rel.c", "global.rel.d"]


def layer_and_table(**overrides: object) -> tuple[RelAttentionLayer, RelPosTable, GlobalEncoder]:
    params = ModelParams(np.random.default_rng(1), np.float64)
    enc = GlobalEncoder(params, config(**overrides))
    return enc.layers[0], enc.table, enc


def test_zero_input_attends_uniformly() -> None:
    layer, table, enc = layer_and_table()
    mask = np.array([[True, True, True, False]])
    buckets = np.array([[[0, 1, 2, 0], [1, 0, 1, 0], [2, 1, 0, 0], [0, 0, 0, 0]]])
    weights = layer.attention_weights(
        Tensor(np.zeros((1, 4, 8))), table, enc.bucket_onehot(buckets, np.float64), mask
    ).data
    assert np.allclose(weights[..., :3], 1.0 / 3.0)
    assert np.all(weights[..., 3] == 0.0)


def test_attention_rows_sum_to_one() -> None:
    layer, table, enc = layer_and_table()
    batch = graph_batch(parse("CC(=O)Nc1ccccc1"))
    h = Tensor(np.random.default_rng(2).normal(size=(1, batch.atom_index.shape[1], 8)))
    weights = layer.attention_weights(
        h, table, enc.bucket_onehot(batch.buckets, np.float64), batch.atom_mask
    ).data
    assert np.allclose(weights.sum(axis=-1), 1.0)


def test_single_atom_attends_to_itself() -> None:
    layer, table, enc = layer_and_table()
    h = Tensor(np.random.default_rng(3).normal(size=(1, 1, 8)))
    onehot = enc.bucket_onehot(np.zeros((1, 1, 1), dtype=np.int64), np.float64)
    out = layer.rel_attention(h, table, onehot, np.array([[True]])).data
    assert np.allclose(out, layer.out(layer.value(h)).data)


def test_distance_table_unused_without_relative_positions() -> None:
    layer, table, enc = layer_and_table(use_rel_pos=False)
    batch = graph_batch(parse("CCCCO"))
    h = Tensor(np.random.default_rng(4).normal(size=(1, 5, 8)))
    onehot = enc.bucket_onehot(batch.buckets, np.float64)
    before = layer.rel_attention(h, table, onehot, batch.atom_mask).data
    table.r.data[:] = np.random.default_rng(5).normal(size=table.r.shape)
    after = layer.rel_attention(h, table, onehot, batch.atom_mask).data
    assert np.array_equal(before, after)


def test_distance_table_changes_scores() -> None:
    layer, table, enc = layer_and_table()
    batch = graph_batch(parse("CCCCO"))
    h = Tensor(np.random.default_rng(4).normal(size=(1, 5, 8)))
    onehot = enc.bucket_onehot(batch.buckets, np.float64)
    before = layer.rel_attention(h, table, onehot, batch.atom_mask).data
    table.r.data[:] = np.random.default_rng(5).normal(size=table.r.shape)
    assert not np.allclose(before, layer.rel_attention(h, table, onehot, batch.atom_mask).data)


def test_encoder_memory_permutation_invariance(vocab: Vocab) -> None:
    model = Graph2Seq(small_config(width=32, heads=4, layers=2, ffn=64), vocab, rng=5)
    rng = np.random.default_rng(6)
    for g in random_graphs(rng, 100, 20):
        base = model.encode(graph_batch(g))[0].data[0]
        for _ in range(5):
            perm = [int(i) for i in rng.permutation(g.num_atoms)]
            moved = model.encode(graph_batch(permute(g, perm)))[0].data[0]
            np.testing.assert_allclose(moved[perm], base, rtol=1e-5, atol=1e-5)
