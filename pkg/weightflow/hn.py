"""Polarized lattices: phases, semistability, Harder-Narasimhan filtrations and mass.

All phase comparisons are exact. Class values are Gaussian rationals and two
values in the reference half plane are ordered by the sign of their cross
product, never by their float angles.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple, Union

from .errors import EmptyInterval, InvalidPolarization, NotComparable, NotSemistable
from .exact import ONE, ZERO, Gaussian, Mass
from .lattice import FinLattice, XFunctional, accumulate_charges, interval_classes

logger = logging.getLogger(__name__)


def _gaussian(value) -> Gaussian:
    if isinstance(value, Gaussian):
        return value
    return Gaussian.parse(value)


@dataclass
class Polarization:
    """Class values Z of a lattice, plus a rotation taking them into (-pi/2, pi/2]."""

    z_values: Dict[int, Gaussian]
    rotation: Gaussian = ONE
    _charges: Dict[int, Tuple[FinLattice, Tuple[Gaussian, ...]]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        self.z_values = {int(k): _gaussian(v) for k, v in self.z_values.items()}
        self.rotation = _gaussian(self.rotation)
        if self.rotation.is_zero():
            raise InvalidPolarization("the reference rotation must be nonzero")
        for k, z in self.z_values.items():
            if not (self.rotation * z).in_right_half_plane():
                raise InvalidPolarization(
                    "Z of class {} is {}, outside the reference half plane".format(k, z)
                )

    @classmethod
    def from_charges(cls, L: FinLattice, charges: Sequence[Gaussian], rotation: Gaussian = ONE) -> "Polarization":
        charges = tuple(_gaussian(c) for c in charges)
        Z = cls(
            {k.class_id: charges[k.representative[1]] - charges[k.representative[0]] for k in interval_classes(L)},
            rotation,
        )
        Z._charges[id(L)] = (L, charges)
        return Z

    @classmethod
    def from_x(cls, L: FinLattice, X: XFunctional) -> "Polarization":
        return cls.from_charges(L, [Gaussian(q) for q in X.charges(L)])

    def charges(self, L: FinLattice) -> Tuple[Gaussian, ...]:
        hit = self._charges.get(id(L))
        if hit is not None and hit[0] is L:
            return hit[1]
        charges = accumulate_charges(L, self.z_values, ZERO)
        self._charges[id(L)] = (L, charges)
        return charges

    def normalized_charges(self, L: FinLattice) -> List[Gaussian]:
        return [self.rotation * c for c in self.charges(L)]

    def z(self, L: FinLattice, lo: int, hi: int) -> Gaussian:
        charges = self.charges(L)
        return charges[hi] - charges[lo]

    def restrict(self, L: FinLattice, lo: int, hi: int) -> Tuple[FinLattice, "Polarization"]:
        sub, idx = L.interval(lo, hi)
        charges = self.charges(L)
        return sub, Polarization.from_charges(sub, [charges[i] - charges[lo] for i in idx], self.rotation)


@dataclass(frozen=True)
class HNFiltration:
    chain: Tuple[int, ...]
    z: Tuple[Gaussian, ...]

    @property
    def phases(self) -> Tuple[float, ...]:
        return tuple(math.atan2(float(w.im), float(w.re)) for w in self.z)

    @property
    def slopes(self) -> Tuple[Union[Fraction, float], ...]:
        """Im z / Re z of every piece; pieces on the imaginary axis get +-inf."""
        return tuple(_slope(w) for w in self.z)

    def __len__(self) -> int:
        return len(self.z)


def _slope(w: Gaussian) -> Union[Fraction, float]:
    if w.re == 0:
        return math.inf if w.im > 0 else -math.inf
    return w.im / w.re


def _arg(z: Gaussian) -> float:
    return math.atan2(float(z.im), float(z.re))


def phase(Z: Polarization, L: FinLattice, lo: int, hi: int) -> float:
    if lo == hi:
        raise EmptyInterval("the phase of an empty interval is undefined")
    if not L.leq[lo, hi]:
        raise NotComparable("{!r} is not below {!r}".format(L.label(lo), L.label(hi)))
    return _arg(Z.rotation * Z.z(L, lo, hi)) - _arg(Z.rotation)


def _semistable_scan(L: FinLattice, Z: Polarization, strict: bool) -> bool:
    nc = Z.normalized_charges(L)
    base = nc[L.bottom]
    total = nc[L.top] - base
    for x in range(L.size):
        if x == L.bottom or (strict and x == L.top):
            continue
        c = total.cross(nc[x] - base)
        if c > 0 or (strict and c == 0):
            return False
    return True


def is_semistable(L: FinLattice, Z: Polarization) -> bool:
    if L.is_trivial():
        return True
    return _semistable_scan(L, Z, strict=False)


def is_stable(L: FinLattice, Z: Polarization) -> bool:
    if L.is_trivial():
        return True
    return _semistable_scan(L, Z, strict=True)


def hn_filtration(L: FinLattice, Z: Polarization) -> HNFiltration:
    nc = Z.normalized_charges(L)
    raw = Z.charges(L)
    chain = [L.bottom]
    pieces: List[Gaussian] = []
    cur = L.bottom
    while cur != L.top:
        above = [x for x in range(L.size) if x != cur and L.leq[cur, x]]
        best = nc[above[0]] - nc[cur]
        for x in above[1:]:
            w = nc[x] - nc[cur]
            if best.cross(w) > 0:
                best = w
        top = L.join_all((x for x in above if best.cross(nc[x] - nc[cur]) == 0), start=cur)
        pieces.append(raw[top] - raw[cur])
        chain.append(top)
        cur = top
    hn = HNFiltration(tuple(chain), tuple(pieces))
    if logger.isEnabledFor(logging.DEBUG):
        for k in range(1, len(chain)):
            sub, Zk = Z.restrict(L, chain[k - 1], chain[k])
            assert is_semistable(sub, Zk), "HN piece {} is not semistable".format(k)
            if k > 1:
                assert (Z.rotation * pieces[k - 2]).cross(Z.rotation * pieces[k - 1]) < 0
    return hn


def mass(L: FinLattice, Z: Polarization) -> Mass:
    if L.is_trivial():
        return Mass(())
    return Mass(z.abs2() for z in hn_filtration(L, Z).z)


def semistable_sublattice(L: FinLattice, Z: Polarization) -> Tuple[FinLattice, XFunctional]:
    """{0} and the x with phase([0, x]) = phase(L), with X a positive multiple of e^{-i phase} Z."""
    if not is_semistable(L, Z):
        raise NotSemistable("the polarized lattice is not semistable")
    nc = Z.normalized_charges(L)
    base = nc[L.bottom]
    total = nc[L.top] - base
    keep = [x for x in range(L.size) if x == L.bottom or total.cross(nc[x] - base) == 0]
    sub = L.sublattice(keep)
    scale = abs(total.re) if total.re != 0 else abs(total.im)
    conj = total.conjugate()
    charges = [((nc[x] - base) * conj).re / scale for x in sorted(keep)]
    return sub, XFunctional.from_charges(sub, charges)


def z_total(L: FinLattice, Z: Polarization) -> Gaussian:
    return Z.z(L, L.bottom, L.top)

