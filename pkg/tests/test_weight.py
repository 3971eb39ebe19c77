from fractions import Fraction

import pytest
from hypothesis import given, settings

from weightflow.dag import Dag, iterated_example_graph, weight_grading
from weightflow.errors import DepthExceeded, InputError, NotComparable, NotParacomplemented, ShapeMismatch
from weightflow.exact import Gaussian
from weightflow.lattice import XFunctional, boolean_lattice, chain_lattice, diamond_lattice, subgraph_lattice
from weightflow.weight import (
    RFiltration,
    filtration_from_grading,
    is_paracomplemented,
    iterated_weight_filtration,
    lambda_lattice,
    phase_zero_sublattice,
    rho,
    strings,
    verify_weight_filtration,
    weight_filtration,
)

from .strategies import a4, dags

half = Fraction(1, 2)


def a2_lattice(m_source=1, m_sink=1):
    G = Dag.from_edges(["src", "sink"], [("src", "sink")], [m_source, m_sink])
    return subgraph_lattice(G)


###
# RFiltration
###
def test_labels_must_match_steps():
    with pytest.raises(ShapeMismatch):
        RFiltration((0, 1, 2), (0,))


def test_labels_must_increase():
    with pytest.raises(InputError):
        RFiltration((0, 1, 2), (1, 1))


def test_validate_needs_bounds():
    L = chain_lattice(2)
    with pytest.raises(NotComparable):
        RFiltration((0, 1), (0,)).validate(L)


def test_upper_and_lower():
    a = RFiltration((0, 1, 2), (-half, half))
    assert a.upper(-half) == 1
    assert a.lower(-half) == 0
    assert a.upper(0) == a.lower(0) == 1
    assert a.upper(1) == 2


###
# rho
###
@pytest.mark.parametrize(
    "labels,expected",
    [
        ((0,), half),
        ((-half, half), half),
        ((0, Fraction(1, 4)), Fraction(1, 8)),
        ((0, Fraction(5, 4)), Fraction(1, 8)),
        ((-1, 0, 1), half),
    ],
)
def test_rho(labels, expected):
    a = RFiltration(tuple(range(len(labels) + 1)), labels)
    assert rho(a) == expected


def test_strings():
    assert strings((-1, 0, 1)) == [(1, 2, 3)]
    assert strings((0, half, 1)) == [(1, 3), (2,)]


###
# paracomplemented
###
def test_unit_gaps_are_paracomplemented():
    L = chain_lattice(2)
    assert is_paracomplemented(L, RFiltration((0, 1, 2), (-half, half)))


def test_short_gap_is_not_paracomplemented():
    L = chain_lattice(2)
    assert not is_paracomplemented(L, RFiltration((0, 1, 2), (0, half)))


def test_lambda_needs_paracomplemented():
    L = chain_lattice(2)
    with pytest.raises(NotParacomplemented):
        lambda_lattice(L, XFunctional.length(L), RFiltration((0, 1, 2), (0, half)))


###
# verify_weight_filtration
###
def test_verify_chain():
    L = chain_lattice(2)
    X = XFunctional.length(L)
    assert verify_weight_filtration(L, X, RFiltration((0, 1, 2), (-half, half)))


def test_verify_rejects_unbalanced():
    L = chain_lattice(2)
    X = XFunctional.length(L)
    assert not verify_weight_filtration(L, X, RFiltration((0, 1, 2), (0, 1)))


def test_verify_rejects_wide_gap():
    L = chain_lattice(2)
    X = XFunctional.length(L)
    assert not verify_weight_filtration(L, X, RFiltration((0, 1, 2), (-1, 1)))


def test_verify_trivial_on_complemented():
    L = boolean_lattice(3)
    assert verify_weight_filtration(L, XFunctional.length(L), RFiltration.trivial(L))


###
# weight_filtration
###
def test_trivial_lattice():
    L = chain_lattice(0)
    a = weight_filtration(L, XFunctional({}))
    assert a.n == 0


@pytest.mark.parametrize("L", [boolean_lattice(3), diamond_lattice(4), chain_lattice(1)])
def test_complemented_is_trivial(L):
    a = weight_filtration(L, XFunctional.length(L))
    assert a.chain == (L.bottom, L.top)
    assert a.labels == (0,)


def test_two_chain():
    L = chain_lattice(2)
    a = weight_filtration(L, XFunctional.length(L))
    assert a.chain == (0, 1, 2)
    assert a.labels == (-half, half)


def test_three_chain():
    L = chain_lattice(3)
    X = XFunctional.length(L)
    a = weight_filtration(L, X)
    assert a.labels == (-1, 0, 1)
    assert verify_weight_filtration(L, X, a)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_chain_labels_are_centered(n):
    L = chain_lattice(n)
    X = XFunctional.length(L)
    a = weight_filtration(L, X)
    assert a.labels == tuple(Fraction(2 * k - n + 1, 2) for k in range(n))
    assert verify_weight_filtration(L, X, a)


def test_weighted_a2():
    L, X = a2_lattice(m_source=1, m_sink=3)
    a = weight_filtration(L, X)
    assert a.labels == (Fraction(-1, 4), Fraction(3, 4))
    assert L.label(a.chain[1]) == frozenset({"sink"})


@settings(max_examples=50, deadline=None)
@given(G=dags(max_vertices=7))
def test_agrees_with_dag_grading(G):
    L, X = subgraph_lattice(G)
    grading, _ = weight_grading(G)
    a = weight_filtration(L, X)
    assert a == filtration_from_grading(L, G, grading)
    assert verify_weight_filtration(L, X, a)


###
# lambda_lattice
###
def test_a2_lambda_is_a_chain():
    L, X = a2_lattice()
    a = weight_filtration(L, X)
    lam = lambda_lattice(L, X, a)
    assert len(lam.factors) == 1
    lattice, Z = lam.as_lattice()
    assert lattice.size == 3
    assert lattice.length == 2
    assert lam.z == Gaussian(1, -half) + Gaussian(1, half)
    assert lam.is_semistable_phase_zero()


def test_lambda_of_unbalanced_is_not_phase_zero():
    L = chain_lattice(3)
    X = XFunctional.length(L)
    lam = lambda_lattice(L, X, RFiltration((0, 1, 2, 3), (-1, 0, 2)))
    assert not lam.is_semistable_phase_zero()


def test_phase_zero_sublattice():
    L, X = a2_lattice()
    lam = lambda_lattice(L, X, weight_filtration(L, X))
    sub, Y = phase_zero_sublattice(lam)
    assert sub.size == 2
    assert Y.total(sub) == 2


###
# iterated_weight_filtration
###
@pytest.mark.parametrize("n", [0, 1, 2, 3, pytest.param(4, marks=pytest.mark.slow)])
def test_example_graph_depth(n):
    L, X = subgraph_lattice(iterated_example_graph(n))
    assert iterated_weight_filtration(L, X).depth == n


def test_depth_cap():
    L, X = subgraph_lattice(iterated_example_graph(2))
    with pytest.raises(DepthExceeded):
        iterated_weight_filtration(L, X, max_depth=1)


def test_a4_wall_labels():
    L, X = subgraph_lattice(a4())
    F = iterated_weight_filtration(L, X)
    assert F.depth == 2
    seen = {}
    previous = frozenset()
    for element, labels in F.flattened():
        (vertex,) = element - previous
        seen[vertex] = labels
        previous = element
    assert seen == {
        "1": (half, -half),
        "2": (-half, -half),
        "3": (half, half),
        "4": (-half, half),
    }


def test_complemented_has_depth_zero():
    L = boolean_lattice(2)
    F = iterated_weight_filtration(L, XFunctional.length(L))
    assert F.depth == 0
    assert F.flattened() == [(L.label(L.top), ())]
