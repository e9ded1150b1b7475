"""
Tokenize SMILES, parse SMILES into molecular graphs and write canonical SMILES.

Only a subset of the SMILES grammar is supported: organic-subset atoms,
bracket atoms, the bond symbols ``- = # : / \\``, branches, ring closures
(single digits and ``%nn``) and dot-separated components. Aromaticity is
taken as written; no kekulization or perception is done.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterator, Sequence
from enum import IntEnum
from typing import Any, NamedTuple

import networkx as nx


SMILES_REGEX = re.compile(
    r"(\[[^\]]+]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|\/|:"
    r"|~|@|\?|>|\*|\$|\%[0-9]{2}|[0-9])"
)
BRACKET_REGEX = re.compile(
    r"\[(?P<isotope>\d+)?(?P<symbol>[A-Z][a-z]?|[a-z][a-z]?|\*)"
    r"(?P<chirality>@@|@)?(?P<hcount>H\d*)?(?P<charge>[+-]\d+|\++|-+)?"
    r"(?::\d+)?]"
)
# fmt: off
ELEMENTS = frozenset((
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al",
    "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr",
    "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm",
    "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf",
    "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og", "*",
))
# fmt: on
AROMATIC_SYMBOLS = frozenset(("b", "c", "n", "o", "p", "s", "se", "as", "te"))
ORGANIC_SUBSET = frozenset(("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"))
ORGANIC_AROMATIC = frozenset(("b", "c", "n", "o", "p", "s"))
DEFAULT_VALENCES: dict[str, tuple[int, ...]] = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}
MAX_RING_NUMBER = 99

Token = str


class Chirality(IntEnum):
    """Raw parity tag as written: ``@`` is CCW, ``@@`` is CW."""

    NONE = 0
    CCW = 1
    CW = 2


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)

    @property
    def is_multiple(self) -> bool:
        return self is not BondOrder.SINGLE


class BondStereo(IntEnum):
    """Directional single-bond mark, read along the directed bond."""

    NONE = 0
    UP = 1
    DOWN = 2

    def flipped(self) -> BondStereo:
        if self is BondStereo.UP:
            return BondStereo.DOWN
        if self is BondStereo.DOWN:
            return BondStereo.UP
        return self


class AtomRecord(NamedTuple):
    element: str
    charge: int = 0
    hydrogens: int = 0
    aromatic: bool = False
    chirality: Chirality = Chirality.NONE
    isotope: int | None = None


class BondRecord(NamedTuple):
    src: int
    dst: int
    order: BondOrder = BondOrder.SINGLE
    stereo: BondStereo = BondStereo.NONE
    ring: bool = False
    conjugated: bool = False


class BondSpec(NamedTuple):
    """An undirected bond before finalization; stereo is read src -> dst."""

    src: int
    dst: int
    order: BondOrder = BondOrder.SINGLE
    stereo: BondStereo = BondStereo.NONE


class MolGraph(NamedTuple):
    """
    Molecular graph with both directions of every bond materialized.

    Directed bonds come in pairs: ``bonds[rev[i]]`` is ``bonds[i]`` with
    source and destination swapped.
    """

    atoms: tuple[AtomRecord, ...]
    bonds: tuple[BondRecord, ...]
    rev: tuple[int, ...]
    component_id: tuple[int, ...]

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_components(self) -> int:
        return len(set(self.component_id))

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """Return, per atom, ``(neighbor, directed bond index)`` pairs."""
        adjacency: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for index, bond in enumerate(self.bonds):
            adjacency[bond.src].append((bond.dst, index))
        return adjacency

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.num_atoms))
        graph.add_edges_from((b.src, b.dst) for b in self.bonds)
        return graph


class SmilesError(ValueError):
    """Malformed or unsupported SMILES."""

    def __init__(self, message: str, smiles: str, offset: int) -> None:
        super().__init__(f"{message} at offset {offset} in {smiles!r}")
        self.smiles = smiles
        self.offset = offset


class UnclosedRing(SmilesError):
    pass


class UnbalancedParen(SmilesError):
    pass


class BadBracketAtom(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


def _lex(smiles: str) -> Iterator[tuple[int, Token]]:
    """Yield ``(offset, token)``; characters the regex skips stand alone."""
    position = 0
    for match in SMILES_REGEX.finditer(smiles):
        for offset in range(position, match.start()):
            yield offset, smiles[offset]
        yield match.start(), match.group()
        position = match.end()
    for offset in range(position, len(smiles)):
        yield offset, smiles[offset]


def tokenize(smiles: str) -> list[Token]:
    """Split a SMILES (or reaction SMILES) into tokens that concatenate back."""
    return [token for _, token in _lex(smiles)]


def implicit_hydrogens(element: str, aromatic: bool, valence: float) -> int:
    """
    Return the implicit H count of an organic-subset atom.

    ``valence`` is the bond order sum with aromatic bonds counted as 1.5.
    Aromatic atoms only use their lowest standard valence.
    """
    if element not in DEFAULT_VALENCES:
        return 0
    used = math.floor(valence)
    allowed = DEFAULT_VALENCES[element]
    if aromatic:
        allowed = allowed[:1]
    for target in allowed:
        if target >= used:
            return target - used
    return 0


def _parse_bracket(token: str, smiles: str, offset: int) -> AtomRecord:
    match = BRACKET_REGEX.fullmatch(token)
    if match is None:
        raise BadBracketAtom(f"bad bracket atom {token!r}", smiles, offset)
    symbol = match["symbol"]
    if symbol[0].islower():
        if symbol not in AROMATIC_SYMBOLS:
            raise UnknownElement(f"unknown element {symbol!r}", smiles, offset)
        element, aromatic = symbol.capitalize(), True
    else:
        if symbol not in ELEMENTS:
            raise UnknownElement(f"unknown element {symbol!r}", smiles, offset)
        element, aromatic = symbol, False
    hcount = match["hcount"]
    hydrogens = 0 if hcount is None else int(hcount[1:] or 1)
    charge_text = match["charge"]
    charge = 0
    if charge_text:
        sign = 1 if charge_text[0] == "+" else -1
        digits = charge_text.lstrip("+-")
        charge = sign * (int(digits) if digits else len(charge_text))
    chirality = {
        None: Chirality.NONE,
        "@": Chirality.CCW,
        "@@": Chirality.CW,
    }[match["chirality"]]
    isotope = int(match["isotope"]) if match["isotope"] else None
    return AtomRecord(
        element=element,
        charge=charge,
        hydrogens=hydrogens,
        aromatic=aromatic,
        chirality=chirality,
        isotope=isotope,
    )


_BOND_TOKENS = {
    "-": (BondOrder.SINGLE, BondStereo.NONE),
    "=": (BondOrder.DOUBLE, BondStereo.NONE),
    "#": (BondOrder.TRIPLE, BondStereo.NONE),
    ":": (BondOrder.AROMATIC, BondStereo.NONE),
    "/": (BondOrder.SINGLE, BondStereo.UP),
    "\\": (BondOrder.SINGLE, BondStereo.DOWN),
}


class _RingOpening(NamedTuple):
    atom: int
    bond: tuple[BondOrder, BondStereo] | None
    offset: int


def parse(smiles: str) -> MolGraph:
    """
    Parse a SMILES string into a molecular graph.

    :raises SmilesError: on any malformed or unsupported input
    """
    atoms: list[AtomRecord] = []
    organic: list[bool] = []
    bonds: list[BondSpec] = []
    bonded: set[frozenset[int]] = set()
    rings: dict[int, _RingOpening] = {}
    branches: list[tuple[int, int]] = []
    previous: int | None = None
    pending: tuple[BondOrder, BondStereo] | None = None
    pending_offset = 0

    def connect(
        src: int,
        dst: int,
        bond: tuple[BondOrder, BondStereo] | None,
        offset: int,
    ) -> None:
        key = frozenset((src, dst))
        if src == dst or key in bonded:
            raise SmilesError("duplicate or self bond", smiles, offset)
        bonded.add(key)
        if bond is None:
            both_aromatic = atoms[src].aromatic and atoms[dst].aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
            bond = (order, BondStereo.NONE)
        bonds.append(BondSpec(src, dst, *bond))

    for offset, token in _lex(smiles):
        atom: AtomRecord | None = None
        if token.startswith("[") and len(token) > 1:
            atom = _parse_bracket(token, smiles, offset)
        elif token in ORGANIC_SUBSET or token == "*":
            atom = AtomRecord(element=token)
        elif token in ORGANIC_AROMATIC:
            atom = AtomRecord(element=token.upper(), aromatic=True)
        if atom is not None:
            atoms.append(atom)
            organic.append(not token.startswith("["))
            index = len(atoms) - 1
            if previous is not None:
                connect(previous, index, pending, offset)
            elif pending is not None:
                raise SmilesError("bond without a preceding atom", smiles, pending_offset)
            previous, pending = index, None
        elif token in _BOND_TOKENS:
            if previous is None or pending is not None:
                raise SmilesError(f"misplaced bond {token!r}", smiles, offset)
            pending, pending_offset = _BOND_TOKENS[token], offset
        elif token == "(":
            if previous is None or pending is not None:
                raise UnbalancedParen("branch without a preceding atom", smiles, offset)
            branches.append((previous, offset))
        elif token == ")":
            if not branches:
                raise UnbalancedParen("unmatched ')'", smiles, offset)
            if pending is not None:
                raise SmilesError("dangling bond", smiles, pending_offset)
            previous, _ = branches.pop()
        elif token == ".":
            if pending is not None:
                raise SmilesError("dangling bond", smiles, pending_offset)
            if branches:
                raise UnbalancedParen("'.' inside a branch", smiles, offset)
            previous = None
        elif token[0] in "%0123456789":
            if previous is None:
                raise SmilesError("ring bond without an atom", smiles, offset)
            if token == "%":
                raise SmilesError("'%' needs a two-digit ring number", smiles, offset)
            number = int(token.lstrip("%"))
            opening = rings.pop(number, None)
            if opening is None:
                rings[number] = _RingOpening(previous, pending, offset)
            else:
                bond = pending
                src, dst = previous, opening.atom
                if opening.bond is not None:
                    if bond is not None and bond[0] != opening.bond[0]:
                        raise SmilesError("conflicting ring bond", smiles, offset)
                    if bond is None:
                        bond, src, dst = opening.bond, opening.atom, previous
                connect(src, dst, bond, offset)
            pending = None
        elif token[0].isalpha() or token == "[":
            if token == "[" or token.startswith("["):
                raise BadBracketAtom("unterminated bracket atom", smiles, offset)
            raise UnknownElement(f"unknown element {token!r}", smiles, offset)
        else:
            raise SmilesError(f"unsupported token {token!r}", smiles, offset)
    if pending is not None:
        raise SmilesError("dangling bond", smiles, pending_offset)
    if branches:
        raise UnbalancedParen("unclosed '('", smiles, branches[-1][1])
    if rings:
        first = min(rings.values(), key=lambda opening: opening.offset)
        raise UnclosedRing("unclosed ring bond", smiles, first.offset)
    valence = [0.0] * len(atoms)
    for bond in bonds:
        valence[bond.src] += bond.order.valence
        valence[bond.dst] += bond.order.valence
    for index, atom in enumerate(atoms):
        if organic[index]:
            atoms[index] = atom._replace(
                hydrogens=implicit_hydrogens(
                    atom.element, atom.aromatic, valence[index]
                )
            )
    return build_graph(atoms, bonds)


def build_graph(
    atoms: Sequence[AtomRecord],
    bonds: Sequence[BondSpec],
) -> MolGraph:
    """Finalize atoms and undirected bonds into a ``MolGraph``."""
    graph = nx.Graph()
    graph.add_nodes_from(range(len(atoms)))
    graph.add_edges_from((b.src, b.dst) for b in bonds)
    bridges = {frozenset(edge) for edge in nx.bridges(graph)}
    has_multiple = [False] * len(atoms)
    for bond in bonds:
        if bond.order.is_multiple:
            has_multiple[bond.src] = has_multiple[bond.dst] = True
    directed: list[BondRecord] = []
    rev: list[int] = []
    for bond in bonds:
        ring = frozenset((bond.src, bond.dst)) not in bridges
        conjugated = bond.order is BondOrder.AROMATIC or (
            has_multiple[bond.src] and has_multiple[bond.dst]
        )
        index = len(directed)
        directed.append(
            BondRecord(bond.src, bond.dst, bond.order, bond.stereo, ring, conjugated)
        )
        directed.append(
            BondRecord(
                bond.dst,
                bond.src,
                bond.order,
                bond.stereo.flipped(),
                ring,
                conjugated,
            )
        )
        rev.extend((index + 1, index))
    component_id = [0] * len(atoms)
    components = sorted(nx.connected_components(graph), key=min)
    for number, component in enumerate(components):
        for atom in component:
            component_id[atom] = number
    return MolGraph(
        atoms=tuple(atoms),
        bonds=tuple(directed),
        rev=tuple(rev),
        component_id=tuple(component_id),
    )


def undirected_bonds(g: MolGraph) -> list[BondSpec]:
    """Return one ``BondSpec`` per bond pair, read along the first direction."""
    return [
        BondSpec(b.src, b.dst, b.order, b.stereo)
        for index, b in enumerate(g.bonds)
        if index < g.rev[index]
    ]


def permute(g: MolGraph, perm: Sequence[int]) -> MolGraph:
    """Relabel atoms so that atom ``i`` becomes atom ``perm[i]``."""
    atoms: list[AtomRecord | None] = [None] * g.num_atoms
    for old, new in enumerate(perm):
        atoms[new] = g.atoms[old]
    assert all(atom is not None for atom in atoms), "perm is not a permutation"
    bonds = [
        b._replace(src=perm[b.src], dst=perm[b.dst]) for b in undirected_bonds(g)
    ]
    return build_graph([a for a in atoms if a is not None], bonds)


def _bond_label(bond: BondRecord) -> tuple[int, int]:
    return int(bond.order), int(bond.stereo)


def _atom_invariant(g: MolGraph, atom: int, degree: int) -> tuple[int | str, ...]:
    record = g.atoms[atom]
    return (
        record.element,
        record.charge,
        degree,
        record.hydrogens,
        int(record.aromatic),
        int(record.chirality),
        -1 if record.isotope is None else record.isotope,
    )


def _dense_ranks(keys: Sequence[Any]) -> list[int]:
    order = {key: rank for rank, key in enumerate(sorted(set(keys)))}
    return [order[key] for key in keys]


def canonical_ranks(g: MolGraph) -> list[int]:
    """
    Rank atoms by iterative partition refinement.

    Initial classes come from atom invariants; classes are refined by the
    sorted ranks of neighbors (with bond labels) until stable. Remaining ties
    are broken by splitting the lowest-index atom of the lowest tied class.
    """
    adjacency = g.neighbors()
    ranks = _dense_ranks(
        [
            _atom_invariant(g, atom, len(adjacency[atom]))
            for atom in range(g.num_atoms)
        ]
    )
    while True:
        classes = len(set(ranks))
        while True:
            ranks = _dense_ranks(
                [
                    (
                        ranks[atom],
                        tuple(
                            sorted(
                                (ranks[nbr], _bond_label(g.bonds[bond]))
                                for nbr, bond in adjacency[atom]
                            )
                        ),
                    )
                    for atom in range(g.num_atoms)
                ]
            )
            if len(set(ranks)) == classes:
                break
            classes = len(set(ranks))
        if classes == g.num_atoms:
            return ranks
        counts: dict[int, int] = {}
        for rank in ranks:
            counts[rank] = counts.get(rank, 0) + 1
        tied = min(rank for rank, count in counts.items() if count > 1)
        chosen = ranks.index(tied)
        split = [2 * rank for rank in ranks]
        split[chosen] -= 1
        ranks = _dense_ranks(split)


def _bond_symbol(g: MolGraph, bond: BondRecord) -> str:
    both_aromatic = g.atoms[bond.src].aromatic and g.atoms[bond.dst].aromatic
    if bond.order is BondOrder.DOUBLE:
        return "="
    if bond.order is BondOrder.TRIPLE:
        return "#"
    if bond.order is BondOrder.AROMATIC:
        return "" if both_aromatic else ":"
    if bond.stereo is BondStereo.UP:
        return "/"
    if bond.stereo is BondStereo.DOWN:
        return "\\"
    return "-" if both_aromatic else ""


def _atom_text(g: MolGraph, atom: int, valence: float) -> str:
    record = g.atoms[atom]
    symbol = record.element.lower() if record.aromatic else record.element
    organic = (
        (
            symbol in ORGANIC_AROMATIC
            if record.aromatic
            else record.element in ORGANIC_SUBSET or record.element == "*"
        )
        and record.charge == 0
        and record.chirality is Chirality.NONE
        and record.isotope is None
        and record.hydrogens
        == implicit_hydrogens(record.element, record.aromatic, valence)
    )
    if organic:
        return symbol
    text = "[" + ("" if record.isotope is None else str(record.isotope)) + symbol
    text += {Chirality.NONE: "", Chirality.CCW: "@", Chirality.CW: "@@"}[
        record.chirality
    ]
    if record.hydrogens:
        text += "H" + (str(record.hydrogens) if record.hydrogens > 1 else "")
    if record.charge:
        sign = "+" if record.charge > 0 else "-"
        text += sign + (str(abs(record.charge)) if abs(record.charge) > 1 else "")
    return text + "]"


def _ring_label(number: int) -> str:
    return str(number) if number < 10 else f"%{number:02d}"


def write_smiles(g: MolGraph, ranks: Sequence[int]) -> str:
    """
    Write a SMILES by depth-first traversal under an atom ranking.

    Each component starts at its lowest-ranked atom; neighbors are visited
    in rank order and all but the last child become branches.
    """
    adjacency = [
        sorted(pairs, key=lambda pair: ranks[pair[0]]) for pairs in g.neighbors()
    ]
    valence = [0.0] * g.num_atoms
    for bond in g.bonds:
        valence[bond.src] += bond.order.valence
    visited = [False] * g.num_atoms
    on_path = [False] * g.num_atoms
    children: list[list[int]] = [[] for _ in g.atoms]
    # Directed bond (opener -> closer) of each ring closure, per atom.
    openings: list[list[int]] = [[] for _ in g.atoms]
    closings: list[list[int]] = [[] for _ in g.atoms]
    parent_bond = [-1] * g.num_atoms

    def explore(root: int) -> None:
        visited[root] = on_path[root] = True
        stack = [(root, iter(adjacency[root]))]
        while stack:
            atom, remaining = stack[-1]
            for nbr, bond in remaining:
                if bond == parent_bond[atom] or g.rev[bond] == parent_bond[atom]:
                    continue
                if not visited[nbr]:
                    parent_bond[nbr] = bond
                    children[atom].append(bond)
                    visited[nbr] = on_path[nbr] = True
                    stack.append((nbr, iter(adjacency[nbr])))
                    break
                if on_path[nbr]:
                    closing = g.rev[bond]
                    openings[nbr].append(closing)
                    closings[atom].append(closing)
            else:
                on_path[atom] = False
                stack.pop()

    free: list[int] = list(range(1, MAX_RING_NUMBER + 1))
    numbers: dict[int, int] = {}

    def emit(root: int) -> str:
        out: list[str] = []
        # Atom indices still to write, interleaved with literal text.
        work: list[int | str] = [root]
        while work:
            item = work.pop()
            if isinstance(item, str):
                out.append(item)
                continue
            atom = item
            out.append(_atom_text(g, atom, valence[atom]))
            released = []
            for bond in sorted(closings[atom], key=lambda b: numbers[b]):
                out.append(_ring_label(numbers[bond]))
                released.append(numbers.pop(bond))
            for bond in sorted(openings[atom], key=lambda b: ranks[g.bonds[b].dst]):
                number = free.pop(0)
                numbers[bond] = number
                out.append(_bond_symbol(g, g.bonds[bond]) + _ring_label(number))
            free.extend(released)
            free.sort()
            tail: list[int | str] = []
            for position, bond in enumerate(children[atom]):
                last = position == len(children[atom]) - 1
                tail.append(("" if last else "(") + _bond_symbol(g, g.bonds[bond]))
                tail.append(g.bonds[bond].dst)
                if not last:
                    tail.append(")")
            work.extend(reversed(tail))
        return "".join(out)

    pieces = []
    for start in sorted(range(g.num_atoms), key=lambda atom: ranks[atom]):
        if visited[start]:
            continue
        explore(start)
        pieces.append(emit(start))
    return ".".join(pieces)


def write_canonical(g: MolGraph) -> str:
    """Return the canonical SMILES of a graph."""
    return write_smiles(g, canonical_ranks(g))


def canonicalize(smiles: str) -> str:
    """Return the canonical spelling of a SMILES string."""
    return write_canonical(parse(smiles))


def is_valid(smiles: str) -> bool:
    """Return True if the SMILES parses."""
    try:
        parse(smiles)
    except SmilesError:
        return False
    return True
