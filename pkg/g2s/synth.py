"""
Synthetic reaction tasks that can be learned at desk scale.

Molecules are grown atom by atom under a seeded generator over C, N, O and
S, with terminal F, Cl or Br, and at most one ring. Two tasks are offered:

* ``canonicalize``: a random spelling of a molecule maps to its canonical
  SMILES.
* ``halide_swap``: a molecule with exactly one halogen maps to the same
  molecule with that halogen replaced by a hydroxyl oxygen.

Records are assigned to splits by hashing the canonical target, so no
target appears in two splits.
"""

from __future__ import annotations

import hashlib
import logging
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from g2s.chem_parse import (
    AtomRecord,
    BondOrder,
    BondSpec,
    MolGraph,
    build_graph,
    undirected_bonds,
    write_canonical,
    write_smiles,
)
from g2s.data import SPLITS


logger = logging.getLogger(__name__)

BACKBONE = ("C", "C", "C", "C", "N", "O", "S")
HALOGENS = ("F", "Cl", "Br")
VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1}
DOUBLE_BOND_RATE = 0.15
RING_RATE = 0.3
HALOGEN_RATE = 0.15
MAX_ATTEMPTS_PER_RECORD = 200


class SpecInfeasible(ValueError):
    pass


class SynthTask(StrEnum):
    CANONICALIZE = "canonicalize"
    HALIDE_SWAP = "halide_swap"


class SynthTaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task: SynthTask = SynthTask.HALIDE_SWAP
    n_train: int = Field(default=2000, ge=0)
    n_valid: int = Field(default=200, ge=0)
    n_test: int = Field(default=200, ge=0)
    max_atoms: int = 12
    seed: int = 7

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}


class _Builder:
    def __init__(self) -> None:
        self.elements: list[str] = []
        self.bonds: list[BondSpec] = []
        self.used: list[int] = []

    def free(self, atom: int) -> int:
        return VALENCE[self.elements[atom]] - self.used[atom]

    def add_atom(self, element: str) -> int:
        self.elements.append(element)
        self.used.append(0)
        return len(self.elements) - 1

    def add_bond(self, src: int, dst: int, order: BondOrder) -> None:
        self.bonds.append(BondSpec(src, dst, order))
        self.used[src] += order.value
        self.used[dst] += order.value

    def graph(self) -> MolGraph:
        atoms = [
            AtomRecord(element, hydrogens=self.free(index))
            for index, element in enumerate(self.elements)
        ]
        return build_graph(atoms, self.bonds)


def _grow(rng: np.random.Generator, heavy: int, halogens: int) -> _Builder | None:
    """Grow a tree of ``heavy`` backbone atoms, maybe close a ring, add halogens."""
    builder = _Builder()
    builder.add_atom("C")
    while len(builder.elements) < heavy:
        anchors = [a for a in range(len(builder.elements)) if builder.free(a) >= 1]
        if not anchors:
            return None
        anchor = int(rng.choice(anchors))
        atom = builder.add_atom(str(rng.choice(BACKBONE)))
        order = BondOrder.SINGLE
        if (
            builder.free(anchor) >= 2
            and builder.free(atom) >= 2
            and rng.random() < DOUBLE_BOND_RATE
        ):
            order = BondOrder.DOUBLE
        builder.add_bond(anchor, atom, order)
    if heavy >= 3 and rng.random() < RING_RATE:
        bonded = {frozenset((b.src, b.dst)) for b in builder.bonds}
        pairs = [
            (a, b)
            for a in range(heavy)
            for b in range(a + 1, heavy)
            if builder.free(a) >= 1
            and builder.free(b) >= 1
            and frozenset((a, b)) not in bonded
        ]
        if pairs:
            a, b = pairs[int(rng.integers(len(pairs)))]
            builder.add_bond(a, b, BondOrder.SINGLE)
    for _ in range(halogens):
        anchors = [a for a in range(heavy) if builder.free(a) >= 1]
        if not anchors:
            return None
        anchor = int(rng.choice(anchors))
        builder.add_bond(anchor, builder.add_atom(str(rng.choice(HALOGENS))), BondOrder.SINGLE)
    return builder


def random_molecule(
    rng: np.random.Generator, max_atoms: int, halogens: int | None = None
) -> MolGraph | None:
    """
    One random molecule of at most ``max_atoms`` atoms, or None when the
    draw cannot be completed.

    :param halogens: exact halogen count; random when None
    """
    if max_atoms < 2:
        raise SpecInfeasible(f"max_atoms must be at least 2, got {max_atoms}")
    total = int(rng.integers(2, max_atoms + 1))
    if halogens is None:
        halogens = int(rng.binomial(total - 1, HALOGEN_RATE))
    builder = _grow(rng, total - halogens, halogens)
    return None if builder is None else builder.graph()


def hydroxylate(g: MolGraph) -> MolGraph:
    """Replace the single halogen of ``g`` with an OH oxygen."""
    halogen = [i for i, atom in enumerate(g.atoms) if atom.element in HALOGENS]
    if len(halogen) != 1:
        raise ValueError(f"expected exactly one halogen, found {len(halogen)}")
    atoms = list(g.atoms)
    atoms[halogen[0]] = AtomRecord("O", hydrogens=1)
    return build_graph(atoms, undirected_bonds(g))


def random_spelling(g: MolGraph, rng: np.random.Generator) -> str:
    """A valid, randomly rooted and ordered SMILES for ``g``."""
    return write_smiles(g, [int(r) for r in rng.permutation(g.num_atoms)])


def split_of(canonical: str, counts: dict[str, int]) -> str:
    """Deterministic split assignment, proportional to the requested counts."""
    total = sum(counts.values())
    point = int(hashlib.sha256(canonical.encode("utf-8")).hexdigest(), 16) % 10_000
    threshold = 0
    for split in SPLITS:
        threshold += counts[split] * 10_000 // max(total, 1)
        if point < threshold:
            return split
    return next(split for split in reversed(SPLITS) if counts[split])


def _record(spec: SynthTaskSpec, rng: np.random.Generator) -> tuple[str, str] | None:
    if spec.task is SynthTask.HALIDE_SWAP:
        g = random_molecule(rng, spec.max_atoms, halogens=1)
        if g is None:
            return None
        return write_canonical(g), write_canonical(hydroxylate(g))
    g = random_molecule(rng, spec.max_atoms)
    if g is None:
        return None
    return random_spelling(g, rng), write_canonical(g)


def generate_synthetic(spec: SynthTaskSpec, out_dir: Path) -> dict[str, Path]:
    """
    Write ``{train,valid,test}.txt`` reaction files for a synthetic task.

    :raises SpecInfeasible: if ``max_atoms < 2`` or the requested number of
        distinct records cannot be drawn
    """
    if spec.max_atoms < 2:
        raise SpecInfeasible(f"max_atoms must be at least 2, got {spec.max_atoms}")
    rng = np.random.default_rng(spec.seed)
    counts = spec.counts()
    lines: dict[str, list[str]] = {split: [] for split in SPLITS}
    seen: set[str] = set()
    budget = MAX_ATTEMPTS_PER_RECORD * max(sum(counts.values()), 1)
    attempts = 0
    while any(len(lines[s]) < counts[s] for s in SPLITS):
        attempts += 1
        if attempts > budget:
            raise SpecInfeasible(
                f"could not draw {counts} distinct records with max_atoms={spec.max_atoms}"
            )
        record = _record(spec, rng)
        if record is None:
            continue
        source, target = record
        key = _dedupe_key(source, target, spec.task)
        split = split_of(target, counts)
        if key in seen or len(lines[split]) >= counts[split]:
            continue
        seen.add(key)
        lines[split].append(f"{source}>>{target}")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        paths[split] = out_dir / f"{split}.txt"
        paths[split].write_text("".join(f"{line}\n" for line in lines[split]), encoding="utf-8")
    logger.info(
        "Wrote %s task: %s records after %d draws",
        spec.task.value,
        {s: len(lines[s]) for s in SPLITS},
        attempts,
    )
    return paths


def _dedupe_key(source: str, target: str, task: SynthTask) -> str:
    """Deduplication key: the canonical source for halide swaps, else the target."""
    return source if task is SynthTask.HALIDE_SWAP else target
