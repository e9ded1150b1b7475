from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from g2s.chem_parse import canonicalize, parse, write_canonical
from g2s.synth import (
    HALOGENS,
    SpecInfeasible,
    SynthTask,
    SynthTaskSpec,
    generate_synthetic,
    hydroxylate,
    random_molecule,
    split_of,
)


def read_pairs(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for line in path.read_text().splitlines():
        source, target = line.split(">>")
        pairs.append((source, target))
    return pairs


def test_hydroxylate_example() -> None:
    assert write_canonical(hydroxylate(parse("CCCl"))) == canonicalize("CCO")
    assert write_canonical(hydroxylate(parse("BrC1CCCC1"))) == canonicalize("OC1CCCC1")


def test_hydroxylate_needs_one_halogen() -> None:
    with pytest.raises(ValueError):
        hydroxylate(parse("CCO"))
    with pytest.raises(ValueError):
        hydroxylate(parse("ClCCl"))


def test_random_molecule_sizes() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = random_molecule(rng, 10, halogens=1)
        if g is None:
            continue
        assert 2 <= g.num_atoms <= 10
        assert sum(atom.element in HALOGENS for atom in g.atoms) == 1
        assert g.num_components == 1


def test_split_of_is_deterministic() -> None:
    counts = {"train": 8, "valid": 1, "test": 1}
    assert split_of("CCO", counts) == split_of("CCO", counts)
    assert split_of("CCO", {"train": 1, "valid": 0, "test": 0}) == "train"


@pytest.mark.parametrize("task", list(SynthTask))
def test_generate_counts_and_targets(tmp_path: Path, task: SynthTask) -> None:
    spec = SynthTaskSpec(task=task, n_train=60, n_valid=10, n_test=10, max_atoms=10, seed=3)
    paths = generate_synthetic(spec, tmp_path)
    splits = {split: read_pairs(path) for split, path in paths.items()}
    assert {split: len(pairs) for split, pairs in splits.items()} == spec.counts()
    for pairs in splits.values():
        for source, target in pairs:
            assert target == canonicalize(target)
            if task is SynthTask.HALIDE_SWAP:
                assert canonicalize(source) == source
                assert write_canonical(hydroxylate(parse(source))) == target
            else:
                assert canonicalize(source) == target


@pytest.mark.parametrize("task", list(SynthTask))
def test_generate_splits_share_no_targets(tmp_path: Path, task: SynthTask) -> None:
    spec = SynthTaskSpec(task=task, n_train=80, n_valid=20, n_test=20, max_atoms=10)
    paths = generate_synthetic(spec, tmp_path)
    targets = {split: {t for _, t in read_pairs(path)} for split, path in paths.items()}
    assert not targets["train"] & targets["valid"]
    assert not targets["train"] & targets["test"]
    assert not targets["valid"] & targets["test"]


def test_generate_is_deterministic(tmp_path: Path) -> None:
    spec = SynthTaskSpec(n_train=30, n_valid=5, n_test=5, seed=11)
    first = generate_synthetic(spec, tmp_path / "a")
    second = generate_synthetic(spec, tmp_path / "b")
    for split in first:
        assert first[split].read_bytes() == second[split].read_bytes()


def test_infeasible_specs(tmp_path: Path) -> None:
    with pytest.raises(SpecInfeasible):
        generate_synthetic(SynthTaskSpec(max_atoms=1), tmp_path)
    with pytest.raises(SpecInfeasible):
        generate_synthetic(SynthTaskSpec(n_train=10, n_valid=0, n_test=0, max_atoms=2), tmp_path)


def test_spec_rejects_unknown_fields() -> None:
    with pytest.raises(ValidationError):
        SynthTaskSpec.model_validate({"task": "halide_swap", "size": 10})
