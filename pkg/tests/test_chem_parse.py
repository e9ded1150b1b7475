from __future__ import annotations

import itertools

import networkx as nx
import numpy as np
import pytest

from g2s.chem_parse import (
    AtomRecord,
    BadBracketAtom,
    BondOrder,
    BondStereo,
    Chirality,
    MolGraph,
    SmilesError,
    UnbalancedParen,
    UnclosedRing,
    UnknownElement,
    canonical_ranks,
    canonicalize,
    implicit_hydrogens,
    is_valid,
    parse,
    permute,
    tokenize,
    write_canonical,
)
from g2s.synth import random_spelling
from tests.conftest import random_graphs


FIXTURES = (
    "CCO",
    "C1CC1",
    "CC(=O)O",
    "c1ccccc1",
    "c1cc[nH]c1",
    "C.C",
    "[NH4+].[Cl-]",
    "N#CC(C)(C)O",
    "F/C=C/F",
    "F/C=C\\F",
    "C[C@@H](N)C(=O)O",
    "C[C@H](N)C(=O)O",
    "[13CH4]",
    "CS(=O)(=O)O",
    "C%10CC%10",
    "C12CC1CC2",
    "OC(=O)c1ccccc1Br",
    "[O-][N+](=O)c1ccccc1",
    "CC(C)(C)[Si](C)(C)Cl",
    "c1ccc2ccccc2c1",
)


def labelled(g: MolGraph) -> nx.Graph:
    graph = nx.Graph()
    for index, atom in enumerate(g.atoms):
        graph.add_node(index, atom=atom)
    for bond in g.bonds:
        graph.add_edge(bond.src, bond.dst, order=bond.order)
    return graph


def isomorphic(a: MolGraph, b: MolGraph) -> bool:
    return nx.is_isomorphic(
        labelled(a),
        labelled(b),
        node_match=lambda x, y: x["atom"] == y["atom"],
        edge_match=lambda x, y: x["order"] == y["order"],
    )


@pytest.mark.parametrize(
    "smiles, tokens",
    [
        ("CC(=O)O", ["C", "C", "(", "=", "O", ")", "O"]),
        ("[NH4+]", ["[NH4+]"]),
        ("", []),
        ("ClCBr", ["Cl", "C", "Br"]),
        ("C%12CC%12", ["C", "%12", "C", "C", "%12"]),
        ("CC>>CO", ["C", "C", ">", ">", "C", "O"]),
    ],
)
def test_tokenize_examples(smiles: str, tokens: list[str]) -> None:
    assert tokenize(smiles) == tokens


def test_tokenize_keeps_unknown_characters() -> None:
    assert tokenize("C!C") == ["C", "!", "C"]
    assert tokenize("  ") == [" ", " "]


@pytest.mark.parametrize("smiles", FIXTURES)
def test_tokenize_round_trip_on_fixtures(smiles: str) -> None:
    assert "".join(tokenize(smiles)) == smiles


def test_tokenize_round_trip_on_generated() -> None:
    rng = np.random.default_rng(0)
    for g in random_graphs(rng, 10_000, 12):
        smiles = random_spelling(g, rng)
        assert "".join(tokenize(smiles)) == smiles


def test_parse_ethanol() -> None:
    g = parse("CCO")
    assert g.num_atoms == 3
    assert len(g.bonds) == 4
    assert all(b.order is BondOrder.SINGLE for b in g.bonds)
    assert g.num_components == 1
    assert [a.hydrogens for a in g.atoms] == [3, 2, 1]


def test_parse_ring_flags() -> None:
    g = parse("C1CC1")
    assert len(g.bonds) == 6
    assert all(b.ring for b in g.bonds)
    assert not any(b.ring for b in parse("CC(C)C").bonds)


def test_parse_components() -> None:
    g = parse("C.C")
    assert g.num_atoms == 2
    assert g.bonds == ()
    assert g.component_id[0] != g.component_id[1]


@pytest.mark.parametrize("smiles", FIXTURES)
def test_reverse_bonds_pair_up(smiles: str) -> None:
    g = parse(smiles)
    for index, bond in enumerate(g.bonds):
        back = g.bonds[g.rev[index]]
        assert g.rev[g.rev[index]] == index
        assert (back.src, back.dst) == (bond.dst, bond.src)
        assert back.order is bond.order
        assert back.ring == bond.ring
        assert back.stereo is bond.stereo.flipped()


def test_parse_bracket_atoms() -> None:
    ammonium, chloride = parse("[NH4+].[Cl-]").atoms
    assert ammonium == AtomRecord("N", charge=1, hydrogens=4)
    assert chloride == AtomRecord("Cl", charge=-1)
    (carbon,) = parse("[13CH4]").atoms
    assert carbon.isotope == 13
    assert parse("[Fe+++]").atoms[0].charge == 3
    assert parse("[CH3:7]").atoms[0] == AtomRecord("C", hydrogens=3)


def test_parse_chirality_and_stereo() -> None:
    assert parse("C[C@@H](N)O").atoms[1].chirality is Chirality.CW
    assert parse("C[C@H](N)O").atoms[1].chirality is Chirality.CCW
    g = parse("F/C=C/F")
    assert g.bonds[0].stereo is BondStereo.UP
    assert g.bonds[1].stereo is BondStereo.DOWN


def test_parse_aromatic_hydrogens() -> None:
    benzene = parse("c1ccccc1")
    assert all(a.aromatic and a.hydrogens == 1 for a in benzene.atoms)
    assert all(b.order is BondOrder.AROMATIC and b.conjugated for b in benzene.bonds)
    pyrrole = parse("c1cc[nH]c1")
    assert pyrrole.atoms[3] == AtomRecord("N", hydrogens=1, aromatic=True)


def test_conjugation_flag() -> None:
    g = parse("C=CC=C")
    middle = [b for b in g.bonds if {b.src, b.dst} == {1, 2}]
    assert all(b.conjugated for b in middle)
    assert not any(b.conjugated for b in parse("C=CCC=C").bonds if {b.src, b.dst} == {1, 2})


def test_ring_bond_symbol_at_either_end() -> None:
    opener = parse("C=1CCC1")
    closer = parse("C1CCC=1")
    for g in (opener, closer):
        orders = {frozenset((b.src, b.dst)): b.order for b in g.bonds}
        assert orders[frozenset((0, 3))] is BondOrder.DOUBLE


@pytest.mark.parametrize(
    "smiles, error, offset",
    [
        ("C1CC", UnclosedRing, 1),
        ("CC(C", UnbalancedParen, 2),
        ("CC)C", UnbalancedParen, 2),
        ("C[Xy]C", UnknownElement, 1),
        ("C[C@H", BadBracketAtom, 1),
        ("[]", BadBracketAtom, 0),
        ("Q", UnknownElement, 0),
    ],
)
def test_parse_errors(smiles: str, error: type[SmilesError], offset: int) -> None:
    with pytest.raises(error) as excinfo:
        parse(smiles)
    assert excinfo.value.offset == offset
    assert excinfo.value.smiles == smiles


@pytest.mark.parametrize(
    "smiles", ["=C", "CC=", "C(=)C", "C$C", "C~C", "C11", "C12CC12", "C%1", "C%C", "%"]
)
def test_parse_rejects_malformed(smiles: str) -> None:
    with pytest.raises(SmilesError):
        parse(smiles)


@pytest.mark.parametrize(
    "element, aromatic, valence, expected",
    [
        ("C", False, 0, 4),
        ("C", False, 4, 0),
        ("C", True, 3.0, 1),
        ("N", False, 3, 0),
        ("S", False, 3, 1),
        ("S", False, 5, 1),
        ("P", False, 4, 1),
        ("Cl", False, 2, 0),
        ("Fe", False, 0, 0),
    ],
)
def test_implicit_hydrogens(element: str, aromatic: bool, valence: float, expected: int) -> None:
    assert implicit_hydrogens(element, aromatic, valence) == expected


def test_canonical_examples() -> None:
    assert write_canonical(parse("OCC")) == write_canonical(parse("CCO"))
    assert write_canonical(parse("C")) == "C"
    assert canonicalize("C(C)(C)O") == canonicalize("OC(C)C")
    assert canonicalize("c1ccccc1O") == canonicalize("Oc1ccccc1")


def test_write_canonical_spellings() -> None:
    assert write_canonical(parse("OCC")) == "CCO"
    assert write_canonical(parse("C1CC1")) == "C1CC1"
    assert write_canonical(parse("C.C")) == "C.C"


def test_canonical_long_chain() -> None:
    chain = "C" * 1200
    assert canonicalize(chain) == chain
    branched = canonicalize("C(" + "C" * 1100 + ")O")
    assert canonicalize("OC" + "C" * 1100) == branched
    assert canonicalize(branched) == branched


@pytest.mark.parametrize("smiles", FIXTURES)
def test_canonical_round_trip(smiles: str) -> None:
    g = parse(smiles)
    again = parse(write_canonical(g))
    assert isomorphic(g, again)
    assert write_canonical(again) == write_canonical(g)


@pytest.mark.parametrize("smiles", ["CCO", "C1CC1", "CC(=O)O", "OC(=O)CN", "C.CO", "c1ccoc1", "FC(Cl)Br"])
def test_canonical_invariant_under_every_permutation(smiles: str) -> None:
    g = parse(smiles)
    expected = write_canonical(g)
    for perm in itertools.permutations(range(g.num_atoms)):
        assert write_canonical(permute(g, perm)) == expected


def test_canonical_invariant_on_random_graphs() -> None:
    rng = np.random.default_rng(5)
    for g in random_graphs(rng, 100, 20):
        expected = write_canonical(g)
        for _ in range(3):
            perm = [int(i) for i in rng.permutation(g.num_atoms)]
            assert write_canonical(permute(g, perm)) == expected


def test_random_spelling_parses_to_same_molecule() -> None:
    rng = np.random.default_rng(9)
    for g in random_graphs(rng, 50, 15):
        spelled = parse(random_spelling(g, rng))
        assert isomorphic(g, spelled)
        assert write_canonical(spelled) == write_canonical(g)


def test_canonical_ranks_are_a_permutation() -> None:
    g = parse("CC(C)(C)C")
    assert sorted(canonical_ranks(g)) == list(range(g.num_atoms))


def test_is_valid() -> None:
    assert is_valid("CCO")
    assert not is_valid("C1CC")
    assert not is_valid("C%1")
    assert is_valid("")
