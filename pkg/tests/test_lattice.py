import logging
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightflow.dag import Dag, iterated_example_graph
from weightflow.errors import NoBounds, NotALattice, NotComparable, TooLarge
from weightflow.lattice import (
    XFunctional,
    boolean_lattice,
    build_lattice,
    chain_lattice,
    check_modular,
    complement_exists,
    diamond_lattice,
    interval_classes,
    is_complemented_interval,
    jh_length,
    loewy_series,
    subgraph_lattice,
)

from .strategies import dags


def pentagon():
    return build_lattice(
        ["0", "a", "b", "c", "1"],
        [("0", "a"), ("a", "b"), ("b", "1"), ("0", "c"), ("c", "1")],
    )


###
# build_lattice
###
def test_single_element():
    L = build_lattice(["x"], [])
    assert L.bottom == L.top == 0
    assert L.length == 0
    assert L.is_trivial()


def test_chain_tables():
    L = build_lattice(["0", "a", "1"], [("0", "a"), ("a", "1")])
    a = L.index("a")
    assert L.meet[a, L.top] == a
    assert L.join[a, L.bottom] == a
    assert L.join[L.bottom, L.top] == L.top
    assert L.length == 2


def test_order_closure_from_covers():
    L = chain_lattice(4)
    assert L.leq[L.index("0"), L.index("4")]
    assert not L.leq[L.index("3"), L.index("1")]


def test_pentagon_builds():
    L = pentagon()
    assert L.size == 5


def test_no_unique_join():
    with pytest.raises(NotALattice):
        build_lattice(
            ["0", "a", "b", "c", "d", "1"],
            [("0", "a"), ("0", "b"), ("a", "c"), ("b", "c"), ("a", "d"), ("b", "d"), ("c", "1"), ("d", "1")],
        )


def test_two_maxima():
    with pytest.raises(NoBounds):
        build_lattice(["0", "a", "b"], [("0", "a"), ("0", "b")])


def test_cycle_rejected():
    with pytest.raises(NotALattice):
        build_lattice(["0", "a", "1"], [("0", "a"), ("a", "1"), ("1", "a")])


def test_unknown_element():
    with pytest.raises(NotALattice):
        build_lattice(["0", "1"], [("0", "2")])


def test_interval_of_incomparable():
    L = boolean_lattice(2)
    with pytest.raises(NotComparable):
        L.interval(L.index("10"), L.index("01"))


###
# check_modular
###
def test_boolean_is_modular():
    assert check_modular(boolean_lattice(2)) is None


def test_diamond_is_modular():
    assert check_modular(diamond_lattice(3)) is None


def test_pentagon_counterexample():
    L = pentagon()
    bad = check_modular(L)
    assert bad is not None
    a, b, x = bad
    assert L.leq[a, b]
    assert L.join[L.meet[x, b], a] != L.meet[L.join[x, a], b]


###
# jh_length
###
def test_jh_length_same_element():
    L = chain_lattice(2)
    assert jh_length(L, 1, 1) == 0


def test_jh_length_chain():
    L = chain_lattice(2)
    assert jh_length(L, L.bottom, L.top) == 2


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_jh_length_boolean(n):
    L = boolean_lattice(n)
    assert jh_length(L, L.bottom, L.top) == n


def test_jh_length_incomparable():
    L = diamond_lattice(3)
    with pytest.raises(NotComparable):
        jh_length(L, L.index("a1"), L.index("a2"))


def test_jh_length_debug_self_check(caplog):
    L = boolean_lattice(3)
    with caplog.at_level(logging.DEBUG, logger="weightflow.lattice"):
        assert jh_length(L, L.bottom, L.top) == 3


###
# interval_classes
###
@pytest.mark.parametrize("n", [1, 2, 5])
def test_chain_classes(n):
    assert len(interval_classes(chain_lattice(n))) == n


def test_square_classes():
    L = boolean_lattice(2)
    classes = interval_classes(L)
    assert len(classes) == 2
    named = {frozenset((L.label(lo), L.label(hi)) for lo, hi in k.members) for k in classes}
    assert named == {
        frozenset({("00", "10"), ("01", "11")}),
        frozenset({("00", "01"), ("10", "11")}),
    }


def test_diamond_one_class():
    assert len(interval_classes(diamond_lattice(3))) == 1


def _class_partition(L):
    return {frozenset((L.label(lo), L.label(hi)) for lo, hi in k.members) for k in interval_classes(L)}


@given(seed=st.integers(0, 10_000))
def test_classes_invariant_under_relabeling(seed):
    base = boolean_lattice(3)
    names = list(base.elements)
    pairs = [(base.label(x), base.label(c)) for x in range(base.size) for c in base.upper_covers(x)]
    rng = random.Random(seed)
    shuffled = names[:]
    rng.shuffle(shuffled)
    rng.shuffle(pairs)
    assert _class_partition(build_lattice(shuffled, pairs)) == _class_partition(base)


###
# XFunctional
###
def test_length_functional_counts_covers():
    L = boolean_lattice(3)
    X = XFunctional.length(L)
    assert X.total(L) == 3
    assert X.interval(L, L.index("100"), L.index("110")) == 1


def test_functional_must_be_positive():
    with pytest.raises(NotALattice):
        XFunctional({0: 0})


###
# complements
###
def test_complement_of_lower_end():
    L = chain_lattice(2)
    assert complement_exists(L, L.bottom, L.bottom, L.top) == L.top


def test_uniserial_has_no_complement():
    L = chain_lattice(2)
    assert complement_exists(L, L.index("1"), L.bottom, L.top) is None


def test_diamond_atom_complement():
    L = diamond_lattice(3)
    y = complement_exists(L, L.index("a1"), L.bottom, L.top)
    assert L.label(y) == "a2"


def test_complemented_intervals():
    assert is_complemented_interval(chain_lattice(1), 0, 1)
    L = chain_lattice(2)
    assert not is_complemented_interval(L, L.bottom, L.top)
    B = boolean_lattice(3)
    assert is_complemented_interval(B, B.bottom, B.top)


@given(seed=st.integers(0, 10_000))
def test_complement_symmetry(seed):
    rng = random.Random(seed)
    L = [boolean_lattice(3), diamond_lattice(4), chain_lattice(3)][seed % 3]
    lo = rng.randrange(L.size)
    hi = rng.choice(list(np.flatnonzero(L.leq[lo])))
    for x in L.between(lo, int(hi)):
        y = complement_exists(L, int(x), lo, int(hi))
        if y is not None:
            assert complement_exists(L, y, lo, int(hi)) is not None


###
# subgraph_lattice
###
def test_single_vertex_lattice():
    L, X = subgraph_lattice(Dag.from_edges(["a"], []))
    assert L.size == 2
    assert L.length == 1
    assert X.total(L) == 1


def test_a2_lattice_is_a_chain():
    G = Dag.from_edges(["src", "sink"], [("src", "sink")], [2, 3])
    L, X = subgraph_lattice(G)
    assert L.elements == (frozenset(), frozenset({"sink"}), frozenset({"src", "sink"}))
    assert X.charges(L) == (0, 3, 5)


def test_composite_arrow_does_not_change_lattice():
    path = Dag.from_edges(["a", "b", "c"], [("a", "b"), ("b", "c")])
    shortcut = Dag.from_edges(["a", "b", "c"], [("a", "b"), ("b", "c"), ("a", "c")])
    L1, _ = subgraph_lattice(path)
    L2, _ = subgraph_lattice(shortcut)
    assert L1.elements == L2.elements
    assert np.array_equal(L1.leq, L2.leq)


def test_element_cap():
    G = Dag.from_edges(["a", "b", "c"], [])
    with pytest.raises(TooLarge):
        subgraph_lattice(G, max_elements=5)


def test_meet_is_intersection():
    L, _ = subgraph_lattice(iterated_example_graph(2))
    for x in range(L.size):
        for y in range(L.size):
            assert L.label(L.meet[x, y]) == L.label(x) & L.label(y)
            assert L.label(L.join[x, y]) == L.label(x) | L.label(y)


@settings(max_examples=40, deadline=None)
@given(G=dags(max_vertices=5))
def test_subgraph_lattice_is_modular(G):
    L, X = subgraph_lattice(G)
    assert check_modular(L) is None
    assert X.total(L) == sum(G.masses)


@settings(max_examples=30, deadline=None)
@given(G=dags(max_vertices=5), seed=st.integers(0, 1000))
def test_random_maximal_chains_agree(G, seed):
    L, _ = subgraph_lattice(G)
    rng = random.Random(seed)
    lo = rng.randrange(L.size)
    hi = int(rng.choice(list(np.flatnonzero(L.leq[lo]))))
    lengths = set()
    for _ in range(5):
        x, steps = lo, 0
        while x != hi:
            x = rng.choice([c for c in L.upper_covers(x) if L.leq[c, hi]])
            steps += 1
        lengths.add(steps)
    assert lengths == {jh_length(L, lo, hi)}


###
# loewy_series
###
def test_loewy_series():
    assert loewy_series(chain_lattice(3)) == [0, 1, 2, 3]
    B = boolean_lattice(2)
    assert loewy_series(B) == [B.bottom, B.top]
