import math
from fractions import Fraction

import pytest
import sympy
from hypothesis import given, settings, strategies as st

from weightflow.errors import EmptyInterval, InvalidPolarization, NotSemistable
from weightflow.exact import Gaussian, Mass
from weightflow.hn import (
    Polarization,
    hn_filtration,
    is_semistable,
    is_stable,
    mass,
    phase,
    semistable_sublattice,
    z_total,
)
from weightflow.lattice import XFunctional, chain_lattice, diamond_lattice, subgraph_lattice

from .strategies import dags


def tilted_chain():
    L = chain_lattice(2)
    return L, Polarization({0: Gaussian(1, 1), 1: Gaussian(1, -1)})


@st.composite
def polarized(draw, max_vertices=4):
    """Closed-subgraph lattice of a random DAG with a random charge per vertex."""
    G = draw(dags(max_vertices=max_vertices, unit_masses=True))
    L, _ = subgraph_lattice(G)
    z = [
        Gaussian(draw(st.integers(1, 4)), draw(st.integers(-4, 4)))
        for _ in range(G.n)
    ]
    charges = []
    for mask in L._cache["masks"]:
        total = Gaussian(0, 0)
        for i in range(G.n):
            if mask >> i & 1:
                total = total + z[i]
        charges.append(total)
    return L, Polarization.from_charges(L, charges)


def chains(L, lo=None):
    """Every strictly increasing chain from 0 to 1."""
    lo = L.bottom if lo is None else lo
    if lo == L.top:
        yield (lo,)
        return
    for x in range(L.size):
        if x != lo and L.leq[lo, x]:
            for rest in chains(L, x):
                yield (lo,) + rest


###
# Polarization
###
def test_outside_half_plane():
    with pytest.raises(InvalidPolarization):
        Polarization({0: Gaussian(-1, 0)})


def test_negative_imaginary_axis_excluded():
    with pytest.raises(InvalidPolarization):
        Polarization({0: Gaussian(0, -1)})


def test_rotation_moves_reference_half_plane():
    L = chain_lattice(1)
    Z = Polarization({0: Gaussian(0, 1)}, rotation=Gaussian(0, -1))
    assert phase(Z, L, L.bottom, L.top) == pytest.approx(math.pi / 2)


def test_from_x():
    L = diamond_lattice(3)
    Z = Polarization.from_x(L, XFunctional.length(L))
    assert z_total(L, Z) == Gaussian(2)


###
# phase
###
def test_real_values_have_phase_zero():
    L = diamond_lattice(2)
    Z = Polarization.from_x(L, XFunctional.length(L))
    for x in range(L.size):
        if x != L.bottom:
            assert phase(Z, L, L.bottom, x) == 0


def test_phase_of_tilted_chain():
    L, Z = tilted_chain()
    assert phase(Z, L, L.bottom, L.top) == 0
    assert phase(Z, L, L.bottom, L.index("1")) == pytest.approx(math.pi / 4)


def test_empty_interval_phase():
    L, Z = tilted_chain()
    with pytest.raises(EmptyInterval):
        phase(Z, L, 1, 1)


###
# semistability
###
def test_length_one_is_stable():
    L = chain_lattice(1)
    Z = Polarization({0: Gaussian(1, 3)})
    assert is_stable(L, Z)


def test_tilted_chain_not_semistable():
    L, Z = tilted_chain()
    assert not is_semistable(L, Z)


def test_reverse_tilt_is_stable():
    L = chain_lattice(2)
    Z = Polarization({0: Gaussian(1, -1), 1: Gaussian(1, 1)})
    assert is_stable(L, Z)


def test_diamond_semistable_not_stable():
    L = diamond_lattice(3)
    Z = Polarization({0: Gaussian(1, 1)})
    assert is_semistable(L, Z)
    assert not is_stable(L, Z)


###
# hn_filtration
###
def test_semistable_has_one_step():
    L = diamond_lattice(3)
    Z = Polarization({0: Gaussian(2, 1)})
    hn = hn_filtration(L, Z)
    assert hn.chain == (L.bottom, L.top)
    assert hn.z == (Gaussian(4, 2),)


def test_tilted_chain_filtration():
    L, Z = tilted_chain()
    hn = hn_filtration(L, Z)
    assert hn.chain == (0, 1, 2)
    assert hn.phases == pytest.approx((math.pi / 4, -math.pi / 4))
    assert hn.slopes == (Fraction(1), Fraction(-1))


def test_slope_on_imaginary_axis():
    L = chain_lattice(2)
    hn = hn_filtration(L, Polarization({0: Gaussian(0, 1), 1: Gaussian(1, -1)}))
    assert hn.chain == (0, 1, 2)
    assert hn.phases == pytest.approx((math.pi / 2, -math.pi / 4))
    assert hn.slopes == (math.inf, Fraction(-1))


def _semistable_piece(L, Z, lo, hi):
    sub, Zk = Z.restrict(L, lo, hi)
    return is_semistable(sub, Zk)


@settings(max_examples=40, deadline=None)
@given(data=polarized())
def test_unique_hn_chain(data):
    L, Z = data
    found = []
    for chain in chains(L):
        pieces = [Z.z(L, a, b) for a, b in zip(chain, chain[1:])]
        if any(p.cross(q) >= 0 for p, q in zip(pieces, pieces[1:])):
            continue
        if all(_semistable_piece(L, Z, a, b) for a, b in zip(chain, chain[1:])):
            found.append(chain)
    assert found == [hn_filtration(L, Z).chain]


@settings(max_examples=40, deadline=None)
@given(data=polarized())
def test_phases_strictly_decrease(data):
    L, Z = data
    phases = hn_filtration(L, Z).phases
    assert all(a > b for a, b in zip(phases, phases[1:]))


###
# mass
###
def test_mass_of_tilted_chain():
    L, Z = tilted_chain()
    assert sympy.simplify(mass(L, Z).value - 2 * sympy.sqrt(2)) == 0
    assert float(mass(L, Z)) == pytest.approx(2 * math.sqrt(2))


def test_mass_of_semistable():
    L = diamond_lattice(3)
    Z = Polarization({0: Gaussian(3, 4)})
    assert mass(L, Z) == Mass([Gaussian(6, 8).abs2()])


def test_mass_of_trivial_lattice():
    L = chain_lattice(0)
    assert float(mass(L, Polarization({}))) == 0


@settings(max_examples=40, deadline=None)
@given(data=polarized())
def test_mass_bounds_central_charge(data):
    L, Z = data
    m = mass(L, Z)
    total = Mass([z_total(L, Z).abs2()])
    assert m >= total
    assert (m == total) == is_semistable(L, Z)


@settings(max_examples=30, deadline=None)
@given(data=polarized())
def test_triangle_inequality(data):
    L, Z = data
    m = mass(L, Z)
    for x in range(L.size):
        lower, Z_lower = Z.restrict(L, L.bottom, x)
        upper, Z_upper = Z.restrict(L, x, L.top)
        assert m <= mass(lower, Z_lower) + mass(upper, Z_upper)


@settings(max_examples=20, deadline=None)
@given(data=polarized(max_vertices=3))
def test_any_semistable_chain_bounds_mass(data):
    L, Z = data
    m = mass(L, Z)
    for chain in chains(L):
        if all(_semistable_piece(L, Z, a, b) for a, b in zip(chain, chain[1:])):
            assert m <= Mass(Z.z(L, a, b).abs2() for a, b in zip(chain, chain[1:]))


###
# semistable_sublattice
###
def test_sublattice_of_stable():
    L = chain_lattice(2)
    Z = Polarization({0: Gaussian(1, -1), 1: Gaussian(1, 1)})
    sub, X = semistable_sublattice(L, Z)
    assert sub.size == 2
    assert X.total(sub) > 0


def test_sublattice_with_real_charges_is_everything():
    L = diamond_lattice(3)
    Z = Polarization({0: Gaussian(2)})
    sub, X = semistable_sublattice(L, Z)
    assert sub.size == L.size
    assert X.total(sub) == 4


def test_sublattice_needs_semistability():
    L, Z = tilted_chain()
    with pytest.raises(NotSemistable):
        semistable_sublattice(L, Z)

