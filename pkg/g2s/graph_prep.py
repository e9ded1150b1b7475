"""
Featurize molecular graphs and pack them into padded training batches.

Atom vectors are 102 long and bond vectors 12 long, built from one-hot
blocks. Values outside a block's range land in its last slot.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from enum import IntEnum
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from g2s.chem_parse import BondOrder, BondStereo, Chirality, MolGraph


logger = logging.getLogger(__name__)

# fmt: off
ATOM_SYMBOLS = (
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe",
    "As", "Al", "I", "B", "V", "K", "Tl", "Yb", "Sb", "Sn", "Ag", "Pd", "Co",
    "Se", "Ti", "Zn", "H", "Li", "Ge", "Cu", "Au", "Ni", "Cd", "In", "Mn",
    "Zr", "Cr", "Pt", "Hg", "Pb", "W", "Ru", "Nb", "Re", "Te", "Rh", "Tc",
    "Ba", "Bi", "Hf", "Mo", "U", "Sm", "Os", "Ir", "Ce", "Gd", "Ga", "Cs",
    "*", "Sr", "unk",
)
# fmt: on
ATOM_BLOCKS = {
    "symbol": len(ATOM_SYMBOLS),
    "degree": 10,
    "charge": 5,
    "valency": 7,
    "hybridization": 5,
    "hydrogens": 5,
    "chirality": 3,
    "aromatic": 2,
}
BOND_BLOCKS = {"type": 5, "stereo": 3, "conjugated": 2, "ring": 2}
ATOM_FDIM = sum(ATOM_BLOCKS.values())
BOND_FDIM = sum(BOND_BLOCKS.values())
INF = 2**15
NUM_BUCKETS = 11
DIFFERENT_MOLECULE = 10
PAD_ID = 0

_SYMBOL_INDEX = {symbol: index for index, symbol in enumerate(ATOM_SYMBOLS)}
_CHIRALITY_SLOT = {Chirality.CCW: 0, Chirality.CW: 1, Chirality.NONE: 2}
_STEREO_SLOT = {BondStereo.UP: 0, BondStereo.DOWN: 1, BondStereo.NONE: 2}
_BOND_TYPE_SLOT = {
    BondOrder.SINGLE: 0,
    BondOrder.DOUBLE: 1,
    BondOrder.TRIPLE: 2,
    BondOrder.AROMATIC: 3,
}


class Hybridization(IntEnum):
    SP = 0
    SP2 = 1
    SP3 = 2
    SP3D = 3
    SP3D2 = 4


class SingleExampleTooLarge(ValueError):
    def __init__(self, index: int, tokens: int, max_tokens: int) -> None:
        super().__init__(
            f"example {index} has {tokens} tokens, more than max_tokens={max_tokens}"
        )
        self.index = index


class FeaturizedGraph(NamedTuple):
    atom_feats: npt.NDArray[np.float32]
    bond_feats: npt.NDArray[np.float32]
    edge_src: npt.NDArray[np.int64]
    edge_dst: npt.NDArray[np.int64]
    edge_rev: npt.NDArray[np.int64]
    # Per directed bond (u, v): bonds (w, u) with w != v.
    incoming: tuple[tuple[int, ...], ...]
    # Per atom u: every bond (w, u).
    incoming_all: tuple[tuple[int, ...], ...]
    buckets: npt.NDArray[np.int64]

    @property
    def num_atoms(self) -> int:
        return len(self.atom_feats)

    @property
    def num_bonds(self) -> int:
        return len(self.bond_feats)


class Example(NamedTuple):
    """A featurized source and its target ids (ending in EOS, possibly empty)."""

    graph: FeaturizedGraph
    src_len: int
    tgt_ids: npt.NDArray[np.int64]


class Batch(NamedTuple):
    """
    Several reactions packed for one forward pass.

    Atoms and bonds of all reactions are concatenated for the local encoder.
    Index ``num_bonds`` in the incoming tables and ``num_atoms`` in
    ``atom_index`` address an appended zero row. Each reaction occupies its
    own row in the padded per-reaction arrays, so attention never crosses
    reactions.
    """

    atom_feats: npt.NDArray[np.float32]
    bond_feats: npt.NDArray[np.float32]
    bond_src: npt.NDArray[np.int64]
    incoming: npt.NDArray[np.int64]
    incoming_mask: npt.NDArray[np.bool_]
    atom_incoming: npt.NDArray[np.int64]
    atom_incoming_mask: npt.NDArray[np.bool_]
    atom_index: npt.NDArray[np.int64]
    atom_mask: npt.NDArray[np.bool_]
    buckets: npt.NDArray[np.int64]
    tgt_ids: npt.NDArray[np.int64]
    tgt_mask: npt.NDArray[np.bool_]

    @property
    def batch_size(self) -> int:
        return len(self.atom_index)

    @property
    def num_atoms(self) -> int:
        return len(self.atom_feats)

    @property
    def num_bonds(self) -> int:
        return len(self.bond_feats)


def _one_hot(size: int, index: int) -> list[float]:
    block = [0.0] * size
    block[min(max(index, 0), size - 1)] = 1.0
    return block


def _charge_slot(charge: int) -> int:
    return charge + 2 if -2 <= charge <= 2 else ATOM_BLOCKS["charge"] - 1


def hybridization(degree: int, orders: Sequence[BondOrder]) -> Hybridization:
    """Heuristic hybridization from the bonds around an atom."""
    if degree >= 6:
        return Hybridization.SP3D2
    if degree == 5:
        return Hybridization.SP3D
    doubles = sum(order is BondOrder.DOUBLE for order in orders)
    if BondOrder.TRIPLE in orders or doubles >= 2:
        return Hybridization.SP
    if doubles or BondOrder.AROMATIC in orders:
        return Hybridization.SP2
    return Hybridization.SP3


def atom_features(g: MolGraph) -> npt.NDArray[np.float32]:
    orders: list[list[BondOrder]] = [[] for _ in g.atoms]
    valence = [0.0] * g.num_atoms
    for bond in g.bonds:
        orders[bond.src].append(bond.order)
        valence[bond.src] += bond.order.valence
    rows = []
    for index, atom in enumerate(g.atoms):
        degree = len(orders[index])
        rows.append(
            _one_hot(len(ATOM_SYMBOLS), _SYMBOL_INDEX.get(atom.element, len(ATOM_SYMBOLS) - 1))
            + _one_hot(ATOM_BLOCKS["degree"], degree)
            + _one_hot(ATOM_BLOCKS["charge"], _charge_slot(atom.charge))
            + _one_hot(ATOM_BLOCKS["valency"], int(valence[index]) + atom.hydrogens)
            + _one_hot(ATOM_BLOCKS["hybridization"], hybridization(degree, orders[index]))
            + _one_hot(ATOM_BLOCKS["hydrogens"], atom.hydrogens)
            + _one_hot(ATOM_BLOCKS["chirality"], _CHIRALITY_SLOT[atom.chirality])
            + _one_hot(ATOM_BLOCKS["aromatic"], int(atom.aromatic))
        )
    return np.array(rows, dtype=np.float32).reshape(g.num_atoms, ATOM_FDIM)


def bond_features(g: MolGraph) -> npt.NDArray[np.float32]:
    rows = [
        _one_hot(BOND_BLOCKS["type"], _BOND_TYPE_SLOT.get(bond.order, BOND_BLOCKS["type"] - 1))
        + _one_hot(BOND_BLOCKS["stereo"], _STEREO_SLOT[bond.stereo])
        + _one_hot(BOND_BLOCKS["conjugated"], int(bond.conjugated))
        + _one_hot(BOND_BLOCKS["ring"], int(bond.ring))
        for bond in g.bonds
    ]
    return np.array(rows, dtype=np.float32).reshape(len(g.bonds), BOND_FDIM)


def shortest_paths(g: MolGraph) -> npt.NDArray[np.int64]:
    """Hop counts between all atom pairs; ``INF`` where no path exists."""
    n = g.num_atoms
    if n == 0:
        return np.zeros((0, 0), dtype=np.int64)
    src = np.array([bond.src for bond in g.bonds], dtype=np.int64)
    dst = np.array([bond.dst for bond in g.bonds], dtype=np.int64)
    adjacency = csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    hops = shortest_path(adjacency, method="D", directed=False, unweighted=True)
    return np.where(np.isinf(hops), INF, hops).astype(np.int64)


def bucketize(d: int, same_molecule: bool) -> int:
    if not same_molecule:
        return DIFFERENT_MOLECULE
    if d < 8:
        return d
    if d < 15:
        return 8
    return 9


def bucket_matrix(
    distances: npt.NDArray[np.int64], component_id: Sequence[int]
) -> npt.NDArray[np.int64]:
    """Vectorized ``bucketize`` over a distance matrix."""
    component = np.asarray(component_id, dtype=np.int64)
    same = component[:, None] == component[None, :]
    buckets = np.where(distances < 8, distances, np.where(distances < 15, 8, 9))
    return np.where(same, buckets, DIFFERENT_MOLECULE).astype(np.int64)


def featurize(g: MolGraph) -> FeaturizedGraph:
    incoming_all: list[list[int]] = [[] for _ in g.atoms]
    for index, bond in enumerate(g.bonds):
        incoming_all[bond.dst].append(index)
    incoming = tuple(
        tuple(w for w in incoming_all[bond.src] if w != g.rev[index])
        for index, bond in enumerate(g.bonds)
    )
    return FeaturizedGraph(
        atom_feats=atom_features(g),
        bond_feats=bond_features(g),
        edge_src=np.array([b.src for b in g.bonds], dtype=np.int64),
        edge_dst=np.array([b.dst for b in g.bonds], dtype=np.int64),
        edge_rev=np.array(g.rev, dtype=np.int64),
        incoming=incoming,
        incoming_all=tuple(tuple(lst) for lst in incoming_all),
        buckets=bucket_matrix(shortest_paths(g), g.component_id),
    )


def _index_table(
    lists: Sequence[Sequence[int]], fill: int
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.bool_]]:
    width = max((len(lst) for lst in lists), default=0)
    width = max(width, 1)
    table = np.full((len(lists), width), fill, dtype=np.int64)
    mask = np.zeros((len(lists), width), dtype=bool)
    for row, lst in enumerate(lists):
        table[row, : len(lst)] = lst
        mask[row, : len(lst)] = True
    return table, mask


def collate(examples: Sequence[Example], pad_id: int = PAD_ID) -> Batch:
    """Pack examples into one ``Batch``."""
    graphs = [ex.graph for ex in examples]
    num_atoms = sum(g.num_atoms for g in graphs)
    num_bonds = sum(g.num_bonds for g in graphs)
    incoming: list[list[int]] = []
    atom_incoming: list[list[int]] = []
    bond_src: list[npt.NDArray[np.int64]] = []
    atom_offset = bond_offset = 0
    for g in graphs:
        incoming.extend([w + bond_offset for w in lst] for lst in g.incoming)
        atom_incoming.extend([w + bond_offset for w in lst] for lst in g.incoming_all)
        bond_src.append(g.edge_src + atom_offset)
        atom_offset += g.num_atoms
        bond_offset += g.num_bonds
    incoming_table, incoming_mask = _index_table(incoming, num_bonds)
    atom_table, atom_table_mask = _index_table(atom_incoming, num_bonds)

    width = max([g.num_atoms for g in graphs] + [1])
    atom_index = np.full((len(graphs), width), num_atoms, dtype=np.int64)
    atom_mask = np.zeros((len(graphs), width), dtype=bool)
    buckets = np.zeros((len(graphs), width, width), dtype=np.int64)
    atom_offset = 0
    for row, g in enumerate(graphs):
        n = g.num_atoms
        atom_index[row, :n] = np.arange(atom_offset, atom_offset + n)
        atom_mask[row, :n] = True
        buckets[row, :n, :n] = g.buckets
        atom_offset += n

    length = max([len(ex.tgt_ids) for ex in examples] + [0])
    tgt_ids = np.full((len(examples), length), pad_id, dtype=np.int64)
    for row, ex in enumerate(examples):
        tgt_ids[row, : len(ex.tgt_ids)] = ex.tgt_ids
    tgt_mask = np.zeros_like(tgt_ids, dtype=bool)
    for row, ex in enumerate(examples):
        tgt_mask[row, : len(ex.tgt_ids)] = True

    def stack(arrays: list[npt.NDArray[np.float32]], dim: int) -> npt.NDArray[np.float32]:
        return np.concatenate(arrays) if arrays else np.zeros((0, dim), np.float32)

    return Batch(
        atom_feats=stack([g.atom_feats for g in graphs], ATOM_FDIM),
        bond_feats=stack([g.bond_feats for g in graphs], BOND_FDIM),
        bond_src=np.concatenate(bond_src) if bond_src else np.zeros(0, np.int64),
        incoming=incoming_table,
        incoming_mask=incoming_mask,
        atom_incoming=atom_table,
        atom_incoming_mask=atom_table_mask,
        atom_index=atom_index,
        atom_mask=atom_mask,
        buckets=buckets,
        tgt_ids=tgt_ids,
        tgt_mask=tgt_mask,
    )


def plan_batches(
    sizes: Sequence[int],
    max_tokens: int,
    rng: np.random.Generator | None = None,
) -> list[list[int]]:
    """
    Group example indices so that ``max(size) * len(group) <= max_tokens``.

    Examples are sorted by size (stably) before grouping; the order of the
    groups is shuffled when ``rng`` is given.

    :raises SingleExampleTooLarge: if one example alone exceeds the budget
    """
    for index, size in enumerate(sizes):
        if size > max_tokens:
            raise SingleExampleTooLarge(index, size, max_tokens)
    batches: list[list[int]] = []
    current: list[int] = []
    for index in sorted(range(len(sizes)), key=lambda i: sizes[i]):
        if current and sizes[index] * (len(current) + 1) > max_tokens:
            batches.append(current)
            current = []
        current.append(index)
    if current:
        batches.append(current)
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    logger.debug("Planned %d batches from %d examples", len(batches), len(sizes))
    return batches


def make_batches(
    examples: Sequence[Example],
    max_tokens: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    plan = plan_batches([ex.src_len for ex in examples], max_tokens, rng)
    return [collate([examples[i] for i in group]) for group in plan]
