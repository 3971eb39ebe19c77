"""Weight filtrations of finite modular lattices.

An R-filtration is stored as a chain ``0 = b_0 < ... < b_n = 1`` of lattice
positions and increasing rational labels; label ``labels[k-1]`` belongs to
the jump ``[b_{k-1}, b_k]`` (step ``k``). The weight filtration is found by
mass descent: the HN filtration of the local lattice Lambda(a) tells every
jump which way to move, and jumps move linearly until two of them meet, a
gap shrinks to 1, or every piece is balanced.
"""

import bisect
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .config import get_settings
from .errors import (
    DepthExceeded,
    InputError,
    NonConvergence,
    NotComparable,
    NotParacomplemented,
    NotSemistable,
    ShapeMismatch,
    TooLarge,
)
from .exact import ZERO, Gaussian, Mass, gaussian_sum, to_fraction
from .hn import HNFiltration, Polarization, hn_filtration, is_semistable
from .lattice import FinLattice, XFunctional, is_complemented_interval, tuple_lattice, tuple_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RFiltration:
    chain: Tuple[int, ...]
    labels: Tuple[Fraction, ...]

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(int(x) for x in self.chain))
        object.__setattr__(self, "labels", tuple(to_fraction(q) for q in self.labels))
        if len(self.chain) != len(self.labels) + 1:
            raise ShapeMismatch("a chain of n steps needs n labels")
        if any(b <= a for a, b in zip(self.labels, self.labels[1:])):
            raise InputError("labels must be strictly increasing")

    @classmethod
    def trivial(cls, L: FinLattice, label=0) -> "RFiltration":
        return cls((L.bottom, L.top), (label,))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def support(self) -> Tuple[Fraction, ...]:
        return self.labels

    def validate(self, L: FinLattice) -> None:
        if self.chain[0] != L.bottom or self.chain[-1] != L.top:
            raise NotComparable("a filtration runs from 0 to 1")
        for a, b in zip(self.chain, self.chain[1:]):
            if a == b or not L.leq[a, b]:
                raise NotComparable("the chain is not strictly increasing")

    def upper(self, lam) -> int:
        """a_+(lam), right continuous."""
        return self.chain[bisect.bisect_right(self.labels, to_fraction(lam))]

    def lower(self, lam) -> int:
        """a_-(lam), left continuous."""
        return self.chain[bisect.bisect_left(self.labels, to_fraction(lam))]

    def step(self, k: int) -> Tuple[int, int]:
        return self.chain[k - 1], self.chain[k]


def rho(a: RFiltration) -> Fraction:
    supp = a.labels
    candidates = [Fraction(1)]
    gaps = [abs(y - x) for i, x in enumerate(supp) for y in supp[i + 1 :]]
    if gaps:
        candidates.append(min(gaps))
    wide = [g - 1 for g in gaps if g > 1]
    if wide:
        candidates.append(min(wide))
    return min(candidates) / 2


def is_paracomplemented(L: FinLattice, a: RFiltration) -> bool:
    """[a_+(l), a_+(l+1)] complemented for all l; only maximal intervals are checked."""
    labels = a.labels
    for j in range(a.n):
        l = bisect.bisect_left(labels, labels[j] + 1)
        if not is_complemented_interval(L, a.chain[j], a.chain[l]):
            return False
    return True


def strings(labels: Sequence[Fraction]) -> List[Tuple[int, ...]]:
    """Steps grouped into runs lam, lam+1, lam+2, ... (1-based step numbers)."""
    position = {lam: k for k, lam in enumerate(labels, start=1)}
    out = []
    for k, lam in enumerate(labels, start=1):
        if lam - 1 in position:
            continue
        run = [k]
        while labels[run[-1] - 1] + 1 in position:
            run.append(position[labels[run[-1] - 1] + 1])
        out.append(tuple(run))
    return out


@dataclass
class StringFactor:
    """One factor of Lambda(a): tuples over a run of steps with unit gaps."""

    steps: Tuple[int, ...]
    labels: Tuple[Fraction, ...]
    lattice: FinLattice
    polarization: Polarization

    @property
    def tuples(self) -> np.ndarray:
        return tuple_rows(self.lattice)

    @cached_property
    def hn(self) -> HNFiltration:
        return hn_filtration(self.lattice, self.polarization)

    @property
    def z(self) -> Gaussian:
        return self.polarization.z(self.lattice, self.lattice.bottom, self.lattice.top)

    def is_semistable_phase_zero(self) -> bool:
        return self.z.im == 0 and is_semistable(self.lattice, self.polarization)

    def mass(self) -> Mass:
        return Mass(w.abs2() for w in self.hn.z)


def _string_rows(L: FinLattice, a: RFiltration, steps: Sequence[int], cap: int) -> np.ndarray:
    intervals = [L.between(*a.step(k)) for k in steps]
    rows = intervals[0][:, None]
    for interval in intervals[1:]:
        allowed: Dict[int, np.ndarray] = {}
        for p in np.unique(rows[:, -1]):
            allowed[int(p)] = np.array(
                [q for q in interval if is_complemented_interval(L, int(p), int(q))], dtype=np.int64
            )
        counts = np.array([len(allowed[int(p)]) for p in rows[:, -1]])
        if counts.sum() > cap:
            raise TooLarge("Lambda factor exceeds {} tuples".format(cap))
        rows = np.concatenate(
            [
                np.column_stack([np.repeat(row[None, :], c, axis=0), allowed[int(row[-1])]])
                for row, c in zip(rows, counts)
                if c
            ]
        )
    return rows


def _build_factor(L: FinLattice, X: XFunctional, a: RFiltration, steps: Tuple[int, ...], cap: int) -> StringFactor:
    rows = _string_rows(L, a, steps, cap)
    xi = X.charges(L)
    labels = tuple(a.labels[k - 1] for k in steps)
    lows = [xi[a.chain[k - 1]] for k in steps]
    weights = [Gaussian(1, lam) for lam in labels]
    charges = [
        gaussian_sum(w * (xi[int(x)] - low) for w, x, low in zip(weights, row, lows)) for row in rows
    ]
    lattice = tuple_lattice(L, rows)
    return StringFactor(steps, labels, lattice, Polarization.from_charges(lattice, charges))


@dataclass
class LambdaLattice:
    """Lambda(a), kept as its product of string factors."""

    ambient: FinLattice
    X: XFunctional
    base: RFiltration
    factors: Tuple[StringFactor, ...]

    @property
    def z(self) -> Gaussian:
        return gaussian_sum(f.z for f in self.factors)

    def is_semistable_phase_zero(self) -> bool:
        return all(f.is_semistable_phase_zero() for f in self.factors)

    def mass(self) -> Mass:
        total = Mass(())
        for f in self.factors:
            total = total + f.mass()
        return total

    def as_lattice(self, max_tuples: Optional[int] = None) -> Tuple[FinLattice, Polarization]:
        cap = max_tuples or get_settings().max_tuples
        parts = [(f.steps, f.tuples, list(f.polarization.charges(f.lattice))) for f in self.factors]
        rows, charges = _product(parts, self.base.n, cap, ZERO)
        lattice = tuple_lattice(self.ambient, rows)
        return lattice, Polarization.from_charges(lattice, charges)


def _product(parts, n: int, cap: int, zero):
    """Cartesian product of factor rows, placed into the columns of their steps."""
    total = 1
    for _, rows, _ in parts:
        total *= len(rows)
    if total > cap:
        raise TooLarge("Lambda(a) has {} elements, above the cap {}".format(total, cap))
    out = np.zeros((1, n), dtype=np.int64)
    charges = [zero]
    for steps, rows, part_charges in parts:
        m = len(rows)
        left = np.repeat(out, m, axis=0)
        pick = np.tile(np.arange(m), len(out))
        left[:, [k - 1 for k in steps]] = rows[pick]
        charges = [c + part_charges[i] for c in charges for i in range(m)]
        out = left
    return out, charges


def lambda_lattice(L: FinLattice, X: XFunctional, a: RFiltration, max_tuples: Optional[int] = None) -> LambdaLattice:
    if not is_paracomplemented(L, a):
        raise NotParacomplemented("Lambda(a) needs a paracomplemented filtration")
    cap = max_tuples or get_settings().max_tuples
    factors = tuple(_build_factor(L, X, a, run, cap) for run in strings(a.labels))
    return LambdaLattice(L, X, a, factors)


def _step_masses(L: FinLattice, X: XFunctional, a: RFiltration) -> List[Fraction]:
    xi = X.charges(L)
    return [xi[a.chain[k]] - xi[a.chain[k - 1]] for k in range(1, a.n + 1)]


def _component_runs(labels: Sequence[Fraction]) -> List[List[int]]:
    runs = [[1]]
    for k in range(2, len(labels) + 1):
        if labels[k - 1] - labels[k - 2] <= 1:
            runs[-1].append(k)
        else:
            runs.append([k])
    return runs


def _component_max(L: FinLattice, xi, a: RFiltration, run: List[int], cap: int, seed: int) -> Fraction:
    """Largest sum of lam_k X([b_{k-1}, F_k]) over admissible tuples on one run."""
    labels = a.labels
    intervals = [L.between(*a.step(k)) for k in run]
    constraints = [
        [i for i in range(j) if labels[run[j] - 1] - labels[run[i] - 1] <= 1] for j in range(len(run))
    ]

    def gain(j, x):
        k = run[j]
        return labels[k - 1] * (xi[int(x)] - xi[a.chain[k - 1]])

    def admissible(partial, j, q):
        return all(is_complemented_interval(L, int(partial[i]), int(q)) for i in constraints[j])

    size = 1
    for interval in intervals:
        size *= len(interval)
    if size <= cap:
        best: Optional[Fraction] = None
        stack = [((), Fraction(0))]
        while stack:
            partial, value = stack.pop()
            j = len(partial)
            if j == len(run):
                if best is None or value > best:
                    best = value
                continue
            for q in intervals[j]:
                if admissible(partial, j, q):
                    stack.append((partial + (int(q),), value + gain(j, q)))
        return best
    logger.warning("condition-3 enumeration over %d tuples exceeds %d; sampling instead", size, cap)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(min(cap, 10_000)):
        partial: Tuple[int, ...] = ()
        value = Fraction(0)
        for j in range(len(run)):
            options = [q for q in intervals[j] if admissible(partial, j, q)]
            if not options:
                break
            q = int(options[rng.integers(len(options))])
            partial += (q,)
            value += gain(j, q)
        else:
            if best is None or value > best:
                best = value
    return best if best is not None else Fraction(0)


def verify_weight_filtration(L: FinLattice, X: XFunctional, a: RFiltration) -> bool:
    a.validate(L)
    if a.n == 0:
        return True
    settings = get_settings()
    labels = a.labels
    for k in range(1, a.n + 1):
        for l in range(k, a.n + 1):
            if labels[l - 1] - labels[k - 1] < 1 and not is_complemented_interval(L, a.chain[k - 1], a.chain[l]):
                logger.debug("steps %d..%d should form a complemented interval", k, l)
                return False
    if sum(lam * x for lam, x in zip(labels, _step_masses(L, X, a))) != 0:
        logger.debug("balancing condition fails")
        return False
    xi = X.charges(L)
    runs = _component_runs(labels)
    with ThreadPoolExecutor(max_workers=settings.threads, thread_name_prefix="verify-worker") as pool:
        futures = [
            pool.submit(_component_max, L, xi, a, run, settings.max_condition_tuples, settings.seed + i)
            for i, run in enumerate(runs)
        ]
        maxima = [f.result() for f in futures]
    if sum(maxima) > 0:
        logger.debug("a tuple of subobjects violates the weight inequality")
        return False
    return True


def _initial_filtration(L: FinLattice, X: XFunctional) -> RFiltration:
    """Maximal chain with labels 2k, shifted so that balancing holds."""
    chain = [L.bottom]
    while chain[-1] != L.top:
        chain.append(L.upper_covers(chain[-1])[0])
    xi = X.charges(L)
    masses = [xi[b] - xi[a] for a, b in zip(chain, chain[1:])]
    raw = [Fraction(2 * k) for k in range(1, len(chain))]
    centre = sum(lam * m for lam, m in zip(raw, masses)) / sum(masses)
    return RFiltration(tuple(chain), tuple(lam - centre for lam in raw))


@dataclass(frozen=True)
class _Jump:
    start: Fraction
    slope: Fraction
    element: int

    def at(self, t: Fraction) -> Fraction:
        return self.start - self.slope * t


def _jumps(a: RFiltration, lam: LambdaLattice) -> List[_Jump]:
    by_step: Dict[int, List[_Jump]] = {}
    for factor in lam.factors:
        hn = factor.hn
        slopes = hn.slopes
        for slot, k in enumerate(factor.steps):
            prev = a.chain[k - 1]
            pieces = []
            for q in range(1, len(hn.chain)):
                element = int(factor.tuples[hn.chain[q], slot])
                if element != prev:
                    pieces.append(_Jump(a.labels[k - 1], slopes[q - 1], element))
                    prev = element
            by_step[k] = pieces
    return [j for k in range(1, a.n + 1) for j in by_step[k]]


def _event_time(jumps: List[_Jump]) -> Fraction:
    t = Fraction(1)
    for u in range(len(jumps)):
        for w in range(u + 1, len(jumps)):
            d0 = jumps[w].start - jumps[u].start
            rate = jumps[u].slope - jumps[w].slope
            if rate >= 0:
                continue
            if w == u + 1 and d0 > 0:
                t = min(t, d0 / -rate)
            if d0 > 1:
                t = min(t, (d0 - 1) / -rate)
    return t


def _filtration_at(L: FinLattice, jumps: List[_Jump], t: Fraction) -> RFiltration:
    chain = [L.bottom]
    labels: List[Fraction] = []
    for j in jumps:
        mu = j.at(t)
        if labels and labels[-1] == mu:
            chain[-1] = j.element
        else:
            chain.append(j.element)
            labels.append(mu)
    return RFiltration(tuple(chain), tuple(labels))


def _descent_step(L: FinLattice, a: RFiltration, lam: LambdaLattice) -> RFiltration:
    jumps = _jumps(a, lam)
    t = _event_time(jumps)
    top_slope = max(abs(j.slope) for j in jumps)
    if top_slope == 0:
        raise NonConvergence("Lambda(a) is unbalanced but no jump moves")
    safe = rho(a) / top_slope
    while True:
        b = _filtration_at(L, jumps, t)
        if is_paracomplemented(L, b):
            return b
        if t <= safe:
            raise NonConvergence("deformation inside rho(a) is not paracomplemented")
        logger.warning("descent step %s breaks paracomplementedness, halving", t)
        t = max(t / 2, safe)


def _snap(L: FinLattice, X: XFunctional, a: RFiltration) -> Optional[RFiltration]:
    """Balance every unit-gap string exactly, keeping the chain."""
    masses = _step_masses(L, X, a)
    labels = list(a.labels)
    for run in strings(a.labels):
        weights = [masses[k - 1] for k in run]
        mu = -sum(j * m for j, m in enumerate(weights)) / sum(weights)
        for j, k in enumerate(run):
            labels[k - 1] = mu + j
    if any(y <= x for x, y in zip(labels, labels[1:])):
        return None
    b = RFiltration(a.chain, tuple(labels))
    if b == a or not is_paracomplemented(L, b):
        return None
    if lambda_lattice(L, X, b).is_semistable_phase_zero():
        return b
    return None


def weight_filtration(L: FinLattice, X: XFunctional, max_iter: Optional[int] = None) -> RFiltration:
    max_iter = max_iter or get_settings().descent_max_iter
    if L.is_trivial():
        return RFiltration((L.bottom,), ())
    if is_complemented_interval(L, L.bottom, L.top):
        return RFiltration.trivial(L)
    a = _initial_filtration(L, X)
    previous_type = None
    snapped_types = set()
    previous_mass = None
    for iteration in range(max_iter):
        lam = lambda_lattice(L, X, a)
        if lam.is_semistable_phase_zero():
            logger.debug("weight filtration found after %d descent steps", iteration)
            return a
        current = float(lam.mass())
        if previous_mass is not None and current > previous_mass * (1 + 1e-12):
            logger.warning("mass of Lambda(a) went up from %.12g to %.12g", previous_mass, current)
        previous_mass = current
        combinatorial_type = (a.chain, tuple(strings(a.labels)))
        if combinatorial_type == previous_type and combinatorial_type not in snapped_types:
            snapped_types.add(combinatorial_type)
            snapped = _snap(L, X, a)
            if snapped is not None:
                return snapped
        previous_type = combinatorial_type
        logger.debug("descent step %d: labels %s, mass %.12g", iteration, [str(q) for q in a.labels], current)
        a = _descent_step(L, a, lam)
    raise NonConvergence("mass descent did not settle within {} steps".format(max_iter))


def phase_zero_sublattice(lam: LambdaLattice, max_tuples: Optional[int] = None) -> Tuple[FinLattice, XFunctional]:
    """Elements of Lambda(a) of phase 0 (and 0 itself), with X = Re Z."""
    if not lam.is_semistable_phase_zero():
        raise NotSemistable("Lambda(a) is not semistable of phase 0")
    cap = max_tuples or get_settings().max_tuples
    parts = []
    for f in lam.factors:
        charges = f.polarization.charges(f.lattice)
        keep = [x for x in range(f.lattice.size) if charges[x].im == 0]
        parts.append((f.steps, f.tuples[keep], [charges[x].re for x in keep]))
    rows, charges = _product(parts, lam.base.n, cap, Fraction(0))
    lattice = tuple_lattice(lam.ambient, rows)
    return lattice, XFunctional.from_charges(lattice, charges)


@dataclass
class IteratedFiltration:
    levels: Tuple[RFiltration, ...]
    lattices: Tuple[FinLattice, ...]
    chain: Tuple[int, ...]
    labels: Tuple[Tuple[Fraction, ...], ...]
    _embedding_cache: Dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def flattened(self) -> List[Tuple[Hashable, Tuple[Fraction, ...]]]:
        """(element label, exponent sequence) for every jump, in lexicographic order."""
        base = self.lattices[0]
        return [(base.label(x), lab) for x, lab in zip(self.chain[1:], self.labels)]


def _embedding(levels, lattices, level: int, y: int, memo) -> Dict[Tuple[Fraction, ...], int]:
    """Positions in the base lattice behind element y of lattice number ``level``."""
    key = (level, y)
    if key in memo:
        return memo[key]
    if level == 0:
        out = {(): y}
    else:
        a = levels[level - 1]
        row = tuple_rows(lattices[level])[y]
        out = {}
        for k in range(1, a.n + 1):
            for prefix, x in _embedding(levels, lattices, level - 1, int(row[k - 1]), memo).items():
                out[prefix + (a.labels[k - 1],)] = x
    memo[key] = out
    return out


def _flatten(levels, lattices) -> Tuple[Tuple[int, ...], Tuple[Tuple[Fraction, ...], ...]]:
    base = lattices[0]
    if not levels:
        if base.is_trivial():
            return (base.bottom,), ()
        return (base.bottom, base.top), ((),)
    memo: Dict = {}
    last = levels[-1]
    depth = len(levels) - 1
    views = [_embedding(levels, lattices, depth, c, memo) for c in last.chain]
    chain = [base.bottom]
    labels: List[Tuple[Fraction, ...]] = []
    for prefix in sorted(views[0]):
        for j in range(1, len(views)):
            x = views[j][prefix]
            if x != chain[-1]:
                chain.append(x)
                labels.append(prefix + (last.labels[j - 1],))
    return tuple(chain), tuple(labels)


def iterated_weight_filtration(L: FinLattice, X: XFunctional, max_depth: Optional[int] = None) -> IteratedFiltration:
    max_depth = get_settings().max_depth if max_depth is None else max_depth
    levels: List[RFiltration] = []
    lattices = [L]
    current, current_x = L, X
    while not is_complemented_interval(current, current.bottom, current.top):
        if len(levels) >= max_depth:
            raise DepthExceeded("iterated weight filtration deeper than {}".format(max_depth))
        a = weight_filtration(current, current_x)
        levels.append(a)
        lam = lambda_lattice(current, current_x, a)
        following, following_x = phase_zero_sublattice(lam)
        if following.length >= current.length:
            raise NonConvergence("derived lattice did not get shorter")
        logger.info(
            "level %d: %d jumps, next lattice has %d elements and length %d",
            len(levels),
            a.n,
            following.size,
            following.length,
        )
        lattices.append(following)
        current, current_x = following, following_x
    chain, labels = _flatten(levels, lattices)
    return IteratedFiltration(tuple(levels), tuple(lattices), chain, labels)


def filtration_from_grading(L: FinLattice, G, v) -> RFiltration:
    """Chain of closed subsets {i : v_i <= lam} of a DAG's subgraph lattice."""
    from .dag import grading_vector

    values = grading_vector(G, v)
    distinct = sorted(set(values))
    chain = [L.bottom]
    for lam in distinct:
        chain.append(L.index(frozenset(G.vertices[i] for i in range(G.n) if values[i] <= lam)))
    return RFiltration(tuple(chain), tuple(distinct))
