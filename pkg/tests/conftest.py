from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
import pytest

from g2s.chem_parse import MolGraph, parse, tokenize
from g2s.decoder import DecoderConfig, Vocab
from g2s.encoder_global import GlobalEncoderConfig
from g2s.encoder_local import DmpnnConfig
from g2s.graph_prep import Batch, Example, collate, featurize
from g2s.model import Graph2Seq, ModelConfig
from g2s.synth import random_molecule


SMILES = ("CCO", "OCC", "C1CC1", "CC(=O)O", "c1ccccc1", "C.C", "N#CC", "CCCl", "CS(C)=O")


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_config(width: int = 16, heads: int = 2, layers: int = 1, ffn: int = 32) -> ModelConfig:
    return ModelConfig(
        encoder_local=DmpnnConfig(hidden=width, steps=2, heads=heads),
        encoder_global=GlobalEncoderConfig(
            layers=layers, heads=heads, d_model=width, ffn=ffn, dropout=0.0
        ),
        decoder=DecoderConfig(
            layers=layers, heads=heads, d_model=width, ffn=ffn, dropout=0.0, max_len=64
        ),
    )


@pytest.fixture
def vocab() -> Vocab:
    return Vocab.build(tokenize(s) for s in SMILES)


@pytest.fixture
def tiny_model(vocab: Vocab) -> Graph2Seq:
    return Graph2Seq(small_config(), vocab, rng=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_batch(vocab: Vocab) -> Callable[[Sequence[str], Sequence[str]], Batch]:
    def build(sources: Sequence[str], targets: Sequence[str] = ()) -> Batch:
        targets = list(targets) or ["" for _ in sources]
        examples = [
            Example(featurize(parse(src)), len(tokenize(src)), vocab.encode(tokenize(tgt)))
            for src, tgt in zip(sources, targets)
        ]
        return collate(examples)

    return build


def random_graphs(
    rng: np.random.Generator, count: int, max_atoms: int
) -> list[MolGraph]:
    graphs: list[MolGraph] = []
    while len(graphs) < count:
        g = random_molecule(rng, max_atoms)
        if g is not None:
            graphs.append(g)
    return graphs


def graph_batch(g: MolGraph, tgt_ids: np.ndarray | None = None) -> Batch:
    ids = np.zeros(0, dtype=np.int64) if tgt_ids is None else tgt_ids
    return collate([Example(featurize(g), g.num_atoms, ids)])
