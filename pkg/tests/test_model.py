from __future__ import annotations

from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from g2s import numeric as nm
from g2s.chem_parse import parse, permute, tokenize, write_canonical
from g2s.decoder import DecoderConfig, Vocab
from g2s.encoder_local import DmpnnConfig
from g2s.graph_prep import Batch
from g2s.model import Graph2Seq, ModelConfig
from tests.conftest import graph_batch, random_graphs, small_config


BatchFactory = Callable[[Sequence[str], Sequence[str]], Batch]


def test_widths_must_agree() -> None:
    with pytest.raises(ValidationError):
        ModelConfig(encoder_local=DmpnnConfig(hidden=128))
    with pytest.raises(ValidationError):
        ModelConfig.model_validate({"decoder": {"d_model": 64}, "unknown": 1})


def test_ablated_and_dropout_copies() -> None:
    cfg = small_config()
    ablated = cfg.ablated(use_rel_pos=False)
    assert not ablated.encoder_global.use_rel_pos
    assert ablated.encoder_global.use_global
    assert cfg.encoder_global.use_rel_pos
    dropped = cfg.with_dropout(0.3)
    assert dropped.encoder_global.dropout == dropped.decoder.dropout == 0.3


def test_loss_is_finite_and_positive(tiny_model: Graph2Seq, make_batch: BatchFactory) -> None:
    loss = tiny_model.loss(make_batch(["CCO", "C.C"], ["OCC", "CC"]))
    assert np.isfinite(loss.item())
    assert loss.item() > 0.0


def test_log_likelihood_matches_loss(tiny_model: Graph2Seq, make_batch: BatchFactory) -> None:
    batch = make_batch(["CCO", "C1CC1"], ["OCC", "CC(=O)O"])
    summed = tiny_model.loss(batch, reduction="sum").item()
    assert -tiny_model.log_likelihood(batch).sum() == pytest.approx(summed, rel=1e-5)


def test_log_likelihood_permutation_invariance(vocab: Vocab) -> None:
    model = Graph2Seq(small_config(width=32, heads=4, layers=2, ffn=64), vocab, rng=9)
    rng = np.random.default_rng(10)
    for g in random_graphs(rng, 100, 20):
        target = vocab.encode(tokenize(write_canonical(g)))[:60]
        base = model.log_likelihood(graph_batch(g, target))[0]
        for _ in range(5):
            perm = [int(i) for i in rng.permutation(g.num_atoms)]
            moved = model.log_likelihood(graph_batch(permute(g, perm), target))[0]
            assert moved == pytest.approx(base, rel=1e-5, abs=1e-5)


def test_full_model_gradient_check(vocab: Vocab) -> None:
    cfg = ModelConfig(
        encoder_local=DmpnnConfig(hidden=8, steps=1, heads=2),
        encoder_global=small_config(8, 2, 1, 8).encoder_global,
        decoder=DecoderConfig(layers=1, heads=2, d_model=8, ffn=8, dropout=0.0, max_len=16),
    )
    model = Graph2Seq(cfg, vocab, rng=0, dtype=np.float64)
    batch = graph_batch(parse("CCO"), vocab.encode(tokenize("OCC")))
    assert batch.tgt_ids.shape == (1, 4)
    assert nm.grad_check(lambda: model.loss(batch), model.params.trainable()) < 1e-4


def test_save_and_load(tmp_path: Path, tiny_model: Graph2Seq, make_batch: BatchFactory) -> None:
    path = tiny_model.save(tmp_path)
    assert path == tmp_path / "model.g2s"
    loaded = Graph2Seq.load(tmp_path)
    assert loaded.vocab == tiny_model.vocab
    assert loaded.cfg == tiny_model.cfg
    batch = make_batch(["CCO"], ["OCC"])
    assert loaded.loss(batch).item() == tiny_model.loss(batch).item()
    assert loaded.params.to_bytes() == path.read_bytes()


def test_load_prefers_best_checkpoint(tmp_path: Path, tiny_model: Graph2Seq, vocab: Vocab) -> None:
    tiny_model.save(tmp_path, "model_10.g2s")
    other = Graph2Seq(small_config(), vocab, rng=99)
    other.save(tmp_path, "best.g2s")
    assert Graph2Seq.load(tmp_path).params.to_bytes() == other.params.to_bytes()
    picked = Graph2Seq.load(tmp_path, "model_10.g2s")
    assert picked.params.to_bytes() == tiny_model.params.to_bytes()


def test_load_without_unique_checkpoint(tmp_path: Path, tiny_model: Graph2Seq) -> None:
    tiny_model.save(tmp_path, "model_1.g2s")
    tiny_model.save(tmp_path, "model_2.g2s")
    with pytest.raises(nm.CheckpointError):
        Graph2Seq.load(tmp_path)


def test_load_rejects_other_shapes(tmp_path: Path, tiny_model: Graph2Seq, vocab: Vocab) -> None:
    tiny_model.save(tmp_path)
    wider = Graph2Seq(small_config(width=32), vocab)
    with pytest.raises(nm.CheckpointError):
        wider.params.load(tmp_path / "model.g2s")


@pytest.mark.parametrize(
    "switches", [{"use_rel_pos": False}, {"use_global": False}, {"use_rel_pos": False, "use_global": False}]
)
def test_ablated_models_run(
    vocab: Vocab, make_batch: BatchFactory, switches: dict[str, bool]
) -> None:
    model = Graph2Seq(small_config().ablated(**switches), vocab, rng=1)
    assert np.isfinite(model.loss(make_batch(["CCO"], ["OCC"])).item())
