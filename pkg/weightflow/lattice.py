import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import get_settings
from .errors import NoBounds, NotALattice, NotComparable, NotModular
from .exact import to_fraction

logger = logging.getLogger(__name__)

# rows of the n x n tables produced per block
CHUNK = 256


class UnionFind:
    def __init__(self):
        self.parent: Dict[Hashable, Hashable] = {}
        self.rank: Counter = Counter()

    def find(self, x):
        if x not in self.parent:
            self.parent[x] = x
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x, y):
        px, py = self.find(x), self.find(y)
        if px == py:
            return
        if self.rank[px] < self.rank[py]:
            px, py = py, px
        self.parent[py] = px
        if self.rank[px] == self.rank[py]:
            self.rank[px] += 1


class FinLattice:
    """Finite bounded lattice on positions 0..n-1 with full order and tables.

    ``elements`` holds the user-facing labels; every operation works on
    positions, and position order fixes all tie-breaks.
    """

    def __init__(
        self,
        elements: Sequence[Hashable],
        leq: np.ndarray,
        meet: np.ndarray,
        join: np.ndarray,
        upper_covers: Optional[Sequence[Sequence[int]]] = None,
    ):
        self.elements = tuple(elements)
        self.leq = np.asarray(leq, dtype=bool)
        self.meet = np.asarray(meet, dtype=np.int32)
        self.join = np.asarray(join, dtype=np.int32)
        n = len(self.elements)
        if self.leq.shape != (n, n) or self.meet.shape != (n, n) or self.join.shape != (n, n):
            raise NotALattice("order and tables must be {0} x {0}".format(n))
        bottoms = np.flatnonzero(self.leq.all(axis=1))
        tops = np.flatnonzero(self.leq.all(axis=0))
        if len(bottoms) != 1 or len(tops) != 1:
            raise NoBounds("a lattice needs a unique least and greatest element")
        self.bottom = int(bottoms[0])
        self.top = int(tops[0])
        if upper_covers is None:
            upper_covers = _covers_from_order(self.leq)
        self._upper = tuple(tuple(int(c) for c in ups) for ups in upper_covers)
        lower: List[List[int]] = [[] for _ in range(n)]
        for x, ups in enumerate(self._upper):
            for c in ups:
                lower[c].append(x)
        self._lower = tuple(tuple(sorted(d)) for d in lower)
        self._cache: Dict = {}

    @property
    def size(self) -> int:
        return len(self.elements)

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return "FinLattice(size={}, length={})".format(self.size, self.length)

    @cached_property
    def _positions(self) -> Dict[Hashable, int]:
        return {label: i for i, label in enumerate(self.elements)}

    def index(self, label: Hashable) -> int:
        try:
            return self._positions[label]
        except KeyError as e:
            raise NotComparable("{!r} is not an element of the lattice".format(label)) from e

    def label(self, x: int) -> Hashable:
        return self.elements[x]

    def upper_covers(self, x: int) -> Tuple[int, ...]:
        return self._upper[x]

    def lower_covers(self, x: int) -> Tuple[int, ...]:
        return self._lower[x]

    @cached_property
    def height(self) -> np.ndarray:
        """Length of [0, x] for every x (rank function)."""
        order = np.argsort(self.leq.sum(axis=0), kind="stable")
        height = np.zeros(self.size, dtype=np.int64)
        for x in order:
            lows = self._lower[x]
            if lows:
                height[x] = max(height[d] for d in lows) + 1
        return height

    @property
    def length(self) -> int:
        return int(self.height[self.top])

    def is_trivial(self) -> bool:
        return self.size == 1

    def between(self, lo: int, hi: int) -> np.ndarray:
        return np.flatnonzero(self.leq[lo] & self.leq[:, hi])

    def join_all(self, items: Iterable[int], start: Optional[int] = None) -> int:
        acc = self.bottom if start is None else start
        for x in items:
            acc = int(self.join[acc, x])
        return acc

    def meet_all(self, items: Iterable[int], start: Optional[int] = None) -> int:
        acc = self.top if start is None else start
        for x in items:
            acc = int(self.meet[acc, x])
        return acc

    def interval(self, lo: int, hi: int) -> Tuple["FinLattice", np.ndarray]:
        """The sublattice [lo, hi] and the positions of its elements in self."""
        if not self.leq[lo, hi]:
            raise NotComparable("{!r} is not below {!r}".format(self.label(lo), self.label(hi)))
        idx = self.between(lo, hi)
        pos = np.full(self.size, -1, dtype=np.int64)
        pos[idx] = np.arange(len(idx))
        sub = np.ix_(idx, idx)
        ups = [[int(pos[c]) for c in self._upper[x] if pos[c] >= 0] for x in idx]
        return (
            FinLattice(
                [self.elements[x] for x in idx],
                self.leq[sub],
                pos[self.meet[sub]],
                pos[self.join[sub]],
                ups,
            ),
            idx,
        )

    def sublattice(self, idx: Sequence[int]) -> "FinLattice":
        """Lattice on the given positions, which must be closed under meet and join."""
        idx = np.asarray(sorted(set(int(i) for i in idx)), dtype=np.int64)
        pos = np.full(self.size, -1, dtype=np.int64)
        pos[idx] = np.arange(len(idx))
        sub = np.ix_(idx, idx)
        meet = pos[self.meet[sub]]
        join = pos[self.join[sub]]
        if (meet < 0).any() or (join < 0).any():
            raise NotALattice("the subset is not closed under meet and join")
        return FinLattice([self.elements[x] for x in idx], self.leq[sub], meet, join)


def _covers_from_order(leq: np.ndarray) -> List[List[int]]:
    n = leq.shape[0]
    strict = leq & ~np.eye(n, dtype=bool)
    s = strict.astype(np.float32)
    covers = strict & ~((s @ s) > 0)
    return [list(np.flatnonzero(covers[x])) for x in range(n)]


def _closure(rel: np.ndarray) -> np.ndarray:
    rel = rel.copy()
    for k in range(rel.shape[0]):
        rel |= rel[:, k : k + 1] & rel[k : k + 1, :]
    return rel


def _bound_table(leq: np.ndarray, lower: bool) -> np.ndarray:
    """Greatest lower (or least upper) bounds, verified for every pair."""
    n = leq.shape[0]
    # below[:, x] marks elements <= x (lower) or >= x (upper)
    below = leq if lower else leq.T
    size = below.sum(axis=0)
    table = np.empty((n, n), dtype=np.int32)
    for a in range(n):
        bounds = below[:, a][:, None] & below
        score = np.where(bounds, size[:, None], -1)
        cand = score.argmax(axis=0)
        missing = ~bounds.any(axis=0)
        violated = (bounds & ~below[:, cand]).any(axis=0)
        bad = np.flatnonzero(missing | violated)
        if len(bad):
            kind = "meet" if lower else "join"
            raise NotALattice(
                "elements {} and {} have no unique {}".format(a, int(bad[0]), kind)
            )
        table[a] = cand
    return table


def build_lattice(elements: Sequence[Hashable], leq_pairs: Iterable[Tuple[Hashable, Hashable]]) -> FinLattice:
    labels = list(elements)
    positions = {label: i for i, label in enumerate(labels)}
    if len(positions) != len(labels):
        raise NotALattice("element labels must be unique")
    n = len(labels)
    if n == 0:
        raise NoBounds("the empty poset has no bounds")
    rel = np.eye(n, dtype=bool)
    for a, b in leq_pairs:
        try:
            rel[positions[a], positions[b]] = True
        except KeyError as e:
            raise NotALattice("order pair refers to unknown element {}".format(e)) from e
    rel = _closure(rel)
    if (rel & rel.T & ~np.eye(n, dtype=bool)).any():
        raise NotALattice("the order relation has a cycle")
    if len(np.flatnonzero(rel.all(axis=1))) != 1 or len(np.flatnonzero(rel.all(axis=0))) != 1:
        raise NoBounds("no unique global minimum and maximum")
    meet = _bound_table(rel, lower=True)
    join = _bound_table(rel, lower=False)
    return FinLattice(labels, rel, meet, join)


def check_modular(L: FinLattice) -> Optional[Tuple[int, int, int]]:
    """First triple (a, b, x) with a <= b violating the modular law, or None."""
    for a in range(L.size):
        for b in np.flatnonzero(L.leq[a]):
            lhs = L.join[L.meet[:, b], a]
            rhs = L.meet[L.join[:, a], b]
            bad = np.flatnonzero(lhs != rhs)
            if len(bad):
                return a, int(b), int(bad[0])
    return None


def _greedy_chain_length(L: FinLattice, lo: int, hi: int, last: bool) -> int:
    x = lo
    steps = 0
    while x != hi:
        ups = [c for c in L.upper_covers(x) if L.leq[c, hi]]
        x = ups[-1] if last else ups[0]
        steps += 1
    return steps


def jh_length(L: FinLattice, lo: int, hi: int) -> int:
    if not L.leq[lo, hi]:
        raise NotComparable("{!r} is not below {!r}".format(L.label(lo), L.label(hi)))
    length = _greedy_chain_length(L, lo, hi, last=False)
    if logger.isEnabledFor(logging.DEBUG):
        other = _greedy_chain_length(L, lo, hi, last=True)
        if other != length:
            raise NotModular(
                "maximal chains of lengths {} and {} in one interval".format(length, other)
            )
    return length


@dataclass(frozen=True)
class IntervalClass:
    representative: Tuple[int, int]
    class_id: int
    members: Tuple[Tuple[int, int], ...] = ()


def interval_classes(L: FinLattice) -> List[IntervalClass]:
    cached = L._cache.get("interval_classes")
    if cached is not None:
        return cached
    uf = UnionFind()
    covers = [(x, c) for x in range(L.size) for c in L.upper_covers(x)]
    for cover in covers:
        uf.find(cover)
    # two upper covers a, b of c span a square [c,a] ~ [b,a|b], [c,b] ~ [a,a|b]
    for c in range(L.size):
        ups = L.upper_covers(c)
        for i in range(len(ups)):
            for j in range(i + 1, len(ups)):
                a, b = ups[i], ups[j]
                s = int(L.join[a, b])
                uf.union((c, a), (b, s))
                uf.union((c, b), (a, s))
    groups: Dict[Hashable, List[Tuple[int, int]]] = {}
    for cover in sorted(covers):
        groups.setdefault(uf.find(cover), []).append(cover)
    classes = [
        IntervalClass(members[0], k, tuple(members)) for k, members in enumerate(groups.values())
    ]
    L._cache["interval_classes"] = classes
    L._cache["cover_class"] = {cover: k.class_id for k in classes for cover in k.members}
    return classes


def cover_class(L: FinLattice) -> Dict[Tuple[int, int], int]:
    interval_classes(L)
    return L._cache["cover_class"]


def accumulate_charges(L: FinLattice, values: Mapping[int, Any], zero: Any) -> Tuple[Any, ...]:
    """Additive charge of [0, x] for every x, summing class values along covers."""
    classes = cover_class(L)
    missing = set(classes.values()) - set(values)
    if missing:
        raise NotALattice("no value for interval class {}".format(min(missing)))
    acc: List[Any] = [None] * L.size
    acc[L.bottom] = zero
    queue = deque([L.bottom])
    while queue:
        x = queue.popleft()
        for c in L.upper_covers(x):
            if acc[c] is None:
                acc[c] = acc[x] + values[classes[(x, c)]]
                queue.append(c)
    return tuple(acc)


@dataclass
class XFunctional:
    """Positive additive function on interval classes."""

    values: Dict[int, Fraction]
    _charges: Dict[int, Tuple[FinLattice, Tuple[Fraction, ...]]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        self.values = {int(k): to_fraction(v) for k, v in self.values.items()}
        bad = [k for k, v in self.values.items() if v <= 0]
        if bad:
            raise NotALattice("X must be positive on every class, class {} is not".format(bad[0]))

    @classmethod
    def length(cls, L: FinLattice) -> "XFunctional":
        return cls({k.class_id: Fraction(1) for k in interval_classes(L)})

    @classmethod
    def from_charges(cls, L: FinLattice, charges: Sequence[Fraction]) -> "XFunctional":
        charges = tuple(to_fraction(q) for q in charges)
        X = cls({k.class_id: charges[k.representative[1]] - charges[k.representative[0]] for k in interval_classes(L)})
        X._charges[id(L)] = (L, charges)
        return X

    def charges(self, L: FinLattice) -> Tuple[Fraction, ...]:
        """X([0, x]) for every position x."""
        hit = self._charges.get(id(L))
        if hit is not None and hit[0] is L:
            return hit[1]
        charges = accumulate_charges(L, self.values, Fraction(0))
        self._charges[id(L)] = (L, charges)
        return charges

    def interval(self, L: FinLattice, lo: int, hi: int) -> Fraction:
        xi = self.charges(L)
        return xi[hi] - xi[lo]

    def total(self, L: FinLattice) -> Fraction:
        return self.interval(L, L.bottom, L.top)


def complement_exists(L: FinLattice, x: int, lo: int, hi: int) -> Optional[int]:
    if not (L.leq[lo, x] and L.leq[x, hi]):
        raise NotComparable("element must lie in the interval")
    ok = (L.meet[x] == lo) & (L.join[x] == hi) & L.leq[lo] & L.leq[:, hi]
    hits = np.flatnonzero(ok)
    return int(hits[0]) if len(hits) else None


def is_complemented_interval(L: FinLattice, lo: int, hi: int) -> bool:
    """Modular and of finite length: complemented iff hi is a join of atoms."""
    if not L.leq[lo, hi]:
        raise NotComparable("{!r} is not below {!r}".format(L.label(lo), L.label(hi)))
    if lo == hi:
        return True
    memo = L._cache.setdefault("complemented", {})
    key = (lo, hi)
    if key not in memo:
        atoms = [c for c in L.upper_covers(lo) if L.leq[c, hi]]
        memo[key] = L.join_all(atoms, start=lo) == hi
    return memo[key]


def _table_chunks(n: int) -> Iterable[slice]:
    for start in range(0, n, CHUNK):
        yield slice(start, min(n, start + CHUNK))


def subgraph_lattice(G, max_elements: Optional[int] = None) -> Tuple[FinLattice, XFunctional]:
    """Closed vertex subsets of a DAG (no edge leaves them) under inclusion."""
    from .dag import closed_subset_masks

    cap = max_elements or get_settings().max_lattice_elements
    masks = closed_subset_masks(G.n, G.successors, G.topological_order, cap=cap)
    M = np.array(masks, dtype=np.int64)
    N = len(M)
    leq = np.empty((N, N), dtype=bool)
    meet = np.empty((N, N), dtype=np.int32)
    join = np.empty((N, N), dtype=np.int32)
    for rows in _table_chunks(N):
        block = M[rows, None]
        leq[rows] = (block & ~M[None, :]) == 0
        meet[rows] = np.searchsorted(M, block & M[None, :])
        join[rows] = np.searchsorted(M, block | M[None, :])
    position = {m: i for i, m in enumerate(masks)}
    pred_mask = [0] * G.n
    for a, b in G.edges:
        pred_mask[b] |= 1 << a
    succ_mask = [0] * G.n
    for a, b in G.edges:
        succ_mask[a] |= 1 << b
    upper = []
    for m in masks:
        ups = []
        for i in range(G.n):
            bit = 1 << i
            if not m & bit and succ_mask[i] & m == succ_mask[i]:
                ups.append(position[m | bit])
        upper.append(sorted(ups))
    labels = [frozenset(G.vertices[i] for i in range(G.n) if m >> i & 1) for m in masks]
    L = FinLattice(labels, leq, meet, join, upper)
    L._cache["masks"] = masks
    charges = [
        sum((G.masses[i] for i in range(G.n) if m >> i & 1), Fraction(0)) for m in masks
    ]
    logger.debug("closed-subgraph lattice with %d elements", N)
    return L, XFunctional.from_charges(L, charges)


class TupleIndex:
    """Row lookup for a set of integer tuples with entries below ``radix``."""

    def __init__(self, rows: np.ndarray, radix: int):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.radix = int(radix)
        self._levels: List[np.ndarray] = []
        code = self.rows[:, 0].copy()
        for j in range(1, self.rows.shape[1]):
            combined = code * self.radix + self.rows[:, j]
            uniq = np.unique(combined)
            self._levels.append(uniq)
            code = np.searchsorted(uniq, combined)
        self._code_to_row = np.full(int(code.max()) + 1 if len(code) else 0, -1, dtype=np.int64)
        self._code_to_row[code] = np.arange(len(code))
        if len(np.unique(code)) != len(code):
            raise NotALattice("tuples must be distinct")

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Row index of each query, -1 where absent."""
        queries = np.asarray(queries, dtype=np.int64)
        code = queries[:, 0].copy()
        valid = np.ones(len(queries), dtype=bool)
        if self.rows.shape[1] == 1:
            valid &= (code >= 0) & (code < len(self._code_to_row))
        for j, uniq in enumerate(self._levels, start=1):
            combined = code * self.radix + queries[:, j]
            pos = np.clip(np.searchsorted(uniq, combined), 0, len(uniq) - 1)
            valid &= uniq[pos] == combined
            code = np.where(valid, pos, 0)
        out = np.full(len(queries), -1, dtype=np.int64)
        out[valid] = self._code_to_row[code[valid]]
        return out


def tuple_lattice(base: FinLattice, tuples: np.ndarray, labels: Optional[Sequence[Hashable]] = None) -> FinLattice:
    """Sublattice of base^k formed by the given rows, ordered componentwise."""
    T = np.asarray(tuples, dtype=np.int64)
    if T.ndim != 2 or len(T) == 0:
        raise NotALattice("tuples must form a nonempty 2-d array")
    N, k = T.shape
    index = TupleIndex(T, base.size)
    leq = np.empty((N, N), dtype=bool)
    meet = np.empty((N, N), dtype=np.int32)
    join = np.empty((N, N), dtype=np.int32)
    for rows in _table_chunks(N):
        left = T[rows][:, None, :]
        right = T[None, :, :]
        leq[rows] = base.leq[left, right].all(axis=2)
        for table, out, kind in ((base.meet, meet, "meet"), (base.join, join, "join")):
            found = index.lookup(table[left, right].reshape(-1, k)).reshape(-1, N)
            if (found < 0).any():
                raise NotALattice("tuples are not closed under componentwise {}".format(kind))
            out[rows] = found
    if labels is None:
        labels = [tuple(base.label(int(x)) for x in row) for row in T]
    L = FinLattice(labels, leq, meet, join)
    L._cache["rows"] = T
    return L


def tuple_rows(L: FinLattice) -> np.ndarray:
    """Base positions behind the elements of a lattice made by ``tuple_lattice``."""
    try:
        return L._cache["rows"]
    except KeyError as e:
        raise NotALattice("the lattice was not built from tuples") from e


def chain_lattice(length: int) -> FinLattice:
    names = [str(i) for i in range(length + 1)]
    return build_lattice(names, zip(names, names[1:]))


def boolean_lattice(n: int) -> FinLattice:
    names = ["".join("1" if m >> i & 1 else "0" for i in range(n)) or "0" for m in range(2**n)]
    pairs = [(names[m], names[m | 1 << i]) for m in range(2**n) for i in range(n) if not m >> i & 1]
    return build_lattice(names, pairs)


def diamond_lattice(k: int) -> FinLattice:
    atoms = ["a{}".format(i + 1) for i in range(k)]
    pairs = [("0", a) for a in atoms] + [(a, "1") for a in atoms]
    if not atoms:
        pairs = [("0", "1")]
    return build_lattice(["0"] + atoms + ["1"], pairs)


def loewy_series(L: FinLattice) -> List[int]:
    """Socle series 0 = s_0 < s_1 < ... = 1, s_{k+1} the join of the atoms over s_k."""
    chain = [L.bottom]
    while chain[-1] != L.top:
        x = chain[-1]
        chain.append(L.join_all(L.upper_covers(x), start=x))
    return chain


def coloewy_series(L: FinLattice) -> List[int]:
    """Radical series, listed from 0 upwards."""
    chain = [L.top]
    while chain[-1] != L.bottom:
        x = chain[-1]
        chain.append(L.meet_all(L.lower_covers(x), start=x))
    return chain[::-1]
