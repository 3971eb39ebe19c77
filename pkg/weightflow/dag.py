import logging
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from math import lcm
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import sympy
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow
from sympy.solvers.simplex import InfeasibleLPError, UnboundedLPError, lpmax

from .errors import InvalidGraph, NoStrictCertificate, NonConvergence, TooLarge
from .exact import to_fraction

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 20


@dataclass(frozen=True)
class Dag:
    vertices: Tuple[str, ...]
    masses: Tuple[Fraction, ...]
    edges: Tuple[Tuple[int, int], ...]
    constants: Tuple[Fraction, ...]

    def __post_init__(self):
        n = len(self.vertices)
        if len(set(self.vertices)) != n:
            raise InvalidGraph("vertex ids must be unique")
        if len(self.masses) != n:
            raise InvalidGraph("one mass per vertex is required")
        if len(self.constants) != len(self.edges):
            raise InvalidGraph("one flow constant per edge is required")
        if any(m <= 0 for m in self.masses):
            raise InvalidGraph("vertex masses must be positive")
        if any(c <= 0 for c in self.constants):
            raise InvalidGraph("flow constants must be positive")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise InvalidGraph("edge ({}, {}) leaves the vertex set".format(a, b))
            if a == b:
                raise InvalidGraph("loop at vertex {}".format(self.vertices[a]))
            if (a, b) in seen:
                raise InvalidGraph(
                    "multiple edges {} -> {}".format(self.vertices[a], self.vertices[b])
                )
            seen.add((a, b))
        # raises on cycles
        _ = self.topological_order

    @classmethod
    def from_edges(
        cls,
        vertices: Sequence[str],
        edges: Sequence[Tuple[str, str]],
        masses: Optional[Sequence] = None,
        constants: Optional[Sequence] = None,
    ) -> "Dag":
        vertices = tuple(str(v) for v in vertices)
        index = {v: i for i, v in enumerate(vertices)}
        try:
            pairs = tuple((index[str(a)], index[str(b)]) for a, b in edges)
        except KeyError as e:
            raise InvalidGraph("edge refers to unknown vertex {}".format(e)) from e
        masses = (
            tuple(Fraction(1) for _ in vertices)
            if masses is None
            else tuple(to_fraction(m) for m in masses)
        )
        constants = (
            tuple(Fraction(1) for _ in pairs)
            if constants is None
            else tuple(to_fraction(c) for c in constants)
        )
        return cls(vertices, masses, pairs, constants)

    @property
    def n(self) -> int:
        return len(self.vertices)

    def index(self, vertex: str) -> int:
        return self.vertices.index(vertex)

    @cached_property
    def successors(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in self.vertices]
        for a, b in self.edges:
            out[a].append(b)
        return out

    @cached_property
    def predecessors(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in self.vertices]
        for a, b in self.edges:
            out[b].append(a)
        return out

    @cached_property
    def topological_order(self) -> Tuple[int, ...]:
        indeg = [0] * self.n
        for _, b in self.edges:
            indeg[b] += 1
        succ: List[List[int]] = [[] for _ in self.vertices]
        for a, b in self.edges:
            succ[a].append(b)
        ready = [i for i in range(self.n) if indeg[i] == 0]
        order: List[int] = []
        while ready:
            ready.sort()
            i = ready.pop(0)
            order.append(i)
            for j in succ[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        if len(order) != self.n:
            raise InvalidGraph("the graph has an oriented cycle")
        return tuple(order)

    def subgraph(self, edge_ids: Sequence[int]) -> "Dag":
        return Dag(
            self.vertices,
            self.masses,
            tuple(self.edges[e] for e in edge_ids),
            tuple(self.constants[e] for e in edge_ids),
        )


@dataclass(frozen=True)
class Grading:
    values: Dict[str, Fraction]

    def __getitem__(self, vertex: str) -> Fraction:
        return self.values[vertex]


@dataclass(frozen=True)
class Certificate:
    values: Dict[Tuple[str, str], Fraction] = field(default_factory=dict)

    def __getitem__(self, edge: Tuple[str, str]) -> Fraction:
        return self.values.get(edge, Fraction(0))

    def is_strict_on(self, edges: Sequence[Tuple[str, str]]) -> bool:
        return all(self[e] > 0 for e in edges)


def closed_subset_masks(
    n: int,
    successors: Sequence[Sequence[int]],
    order: Sequence[int],
    cap: Optional[int] = None,
) -> List[int]:
    """Bit masks of the vertex sets with no edge leaving them.

    ``order`` must be a topological order; vertices are added sinks first so a
    vertex can join a set only once all of its successors are in it.
    """
    succ_mask = [0] * n
    for i in range(n):
        for j in successors[i]:
            succ_mask[i] |= 1 << j
    masks = [0]
    for i in reversed(order):
        need = succ_mask[i]
        bit = 1 << i
        masks.extend([m | bit for m in masks if m & need == need])
        if cap is not None and len(masks) > cap:
            raise TooLarge(
                "more than {} closed subsets; raise the element cap".format(cap)
            )
    masks.sort()
    return masks


def grading_vector(G: Dag, v) -> List[Fraction]:
    if isinstance(v, Grading):
        v = v.values
    if isinstance(v, Mapping):
        try:
            return [to_fraction(v[x]) for x in G.vertices]
        except KeyError as e:
            raise InvalidGraph("grading misses vertex {}".format(e)) from e
    values = [to_fraction(x) for x in v]
    if len(values) != G.n:
        raise InvalidGraph("grading has {} values for {} vertices".format(len(values), G.n))
    return values


def grading_energy(G: Dag, v) -> Fraction:
    values = grading_vector(G, v)
    return sum((m * x * x for m, x in zip(G.masses, values)), Fraction(0))


def _longest_path_grading(G: Dag) -> List[Fraction]:
    v = [Fraction(0)] * G.n
    for i in reversed(G.topological_order):
        succ = G.successors[i]
        if succ:
            v[i] = max(v[j] for j in succ) + 1
    return v


def _forest_components(G: Dag, working: Sequence[int]) -> Tuple[List[int], List[List[Tuple[int, int]]]]:
    adj: List[List[Tuple[int, int]]] = [[] for _ in range(G.n)]
    for e in working:
        a, b = G.edges[e]
        adj[a].append((b, e))
        adj[b].append((a, e))
    comp = [-1] * G.n
    ncomp = 0
    for root in range(G.n):
        if comp[root] >= 0:
            continue
        comp[root] = ncomp
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j, _ in adj[i]:
                if comp[j] < 0:
                    comp[j] = ncomp
                    queue.append(j)
        ncomp += 1
    return comp, adj


def _equality_minimizer(G: Dag, working: Sequence[int]) -> List[Fraction]:
    """Minimum of sum m v^2 with the working edges held at gap exactly one."""
    _, adj = _forest_components(G, working)
    h: List[Optional[Fraction]] = [None] * G.n
    v = [Fraction(0)] * G.n
    for root in range(G.n):
        if h[root] is not None:
            continue
        h[root] = Fraction(0)
        members = [root]
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j, e in adj[i]:
                if h[j] is None:
                    a, _ = G.edges[e]
                    h[j] = h[i] - 1 if a == i else h[i] + 1
                    members.append(j)
                    queue.append(j)
        total = sum((G.masses[i] for i in members), Fraction(0))
        shift = -sum((G.masses[i] * h[i] for i in members), Fraction(0)) / total
        for i in members:
            v[i] = h[i] + shift
    return v


def _forest_multipliers(G: Dag, working: Sequence[int], v: Sequence[Fraction]) -> Dict[int, Fraction]:
    u: Dict[int, Fraction] = {}
    for e in working:
        rest = [f for f in working if f != e]
        _, adj = _forest_components(G, rest)
        a, _ = G.edges[e]
        side = {a}
        queue = deque([a])
        while queue:
            i = queue.popleft()
            for j, _ in adj[i]:
                if j not in side:
                    side.add(j)
                    queue.append(j)
        u[e] = sum((G.masses[i] * v[i] for i in side), Fraction(0))
    return u


def weight_grading(G: Dag) -> Tuple[Grading, Certificate]:
    """Exact primal active-set solution of min sum m v^2 with unit edge gaps."""
    n = G.n
    v = _longest_path_grading(G)
    working: List[int] = []
    max_iter = 50 * (n + len(G.edges) + 1) ** 2
    for it in range(max_iter):
        target = _equality_minimizer(G, working)
        p = [target[i] - v[i] for i in range(n)]
        if not any(p):
            u = _forest_multipliers(G, working, v)
            negative = sorted(e for e in working if u[e] < 0)
            if not negative:
                logger.debug("active set converged after %d iterations", it)
                break
            working.remove(negative[0])
            continue
        alpha = Fraction(1)
        blocking = None
        for e, (a, b) in enumerate(G.edges):
            if e in working:
                continue
            dp = p[a] - p[b]
            if dp < 0:
                step = (v[a] - v[b] - 1) / (-dp)
                if step < alpha:
                    alpha, blocking = step, e
        v = [v[i] + alpha * p[i] for i in range(n)]
        if blocking is not None:
            working.append(blocking)
    else:
        raise NonConvergence("active set did not settle within {} pivots".format(max_iter))

    grading = Grading({G.vertices[i]: v[i] for i in range(n)})
    certificate = Certificate(
        {_edge_name(G, e): u[e] for e in sorted(working) if u[e] != 0}
    )
    return grading, certificate


def tight_edges(G: Dag, v) -> List[int]:
    values = grading_vector(G, v)
    return [e for e, (a, b) in enumerate(G.edges) if values[a] - values[b] == 1]


def _max_closure_enumerate(G: Dag, weights: Sequence[Fraction], edge_ids: Sequence[int]) -> Fraction:
    sub = G.subgraph(edge_ids)
    succ_mask = [0] * G.n
    for a, b in sub.edges:
        succ_mask[a] |= 1 << b
    sets = [(0, Fraction(0))]
    for i in reversed(sub.topological_order):
        need = succ_mask[i]
        bit = 1 << i
        sets.extend([(m | bit, w + weights[i]) for m, w in sets if m & need == need])
    return max(w for _, w in sets)


def _max_closure_mincut(G: Dag, weights: Sequence[Fraction], edge_ids: Sequence[int]) -> Optional[Fraction]:
    """Max-weight closure as a min cut; None when capacities overflow int32."""
    scale = lcm(*[w.denominator for w in weights]) if weights else 1
    ints = [int(w * scale) for w in weights]
    positive = sum(x for x in ints if x > 0)
    infinite = positive + 1
    if infinite >= 2**31 - 1:
        return None
    n = G.n
    source, sink = n, n + 1
    rows: List[int] = []
    cols: List[int] = []
    caps: List[int] = []
    for i, x in enumerate(ints):
        if x > 0:
            rows.append(source)
            cols.append(i)
            caps.append(x)
        elif x < 0:
            rows.append(i)
            cols.append(sink)
            caps.append(-x)
    for e in edge_ids:
        a, b = G.edges[e]
        rows.append(a)
        cols.append(b)
        caps.append(infinite)
    graph = csr_matrix(
        (np.asarray(caps, dtype=np.int32), (np.asarray(rows), np.asarray(cols))),
        shape=(n + 2, n + 2),
    )
    cut = maximum_flow(graph, source, sink).flow_value
    return Fraction(positive - int(cut), scale)


def verify_grading(G: Dag, v, method: str = "auto") -> bool:
    values = grading_vector(G, v)
    for a, b in G.edges:
        if values[a] - values[b] < 1:
            return False
    weights = [m * x for m, x in zip(G.masses, values)]
    if sum(weights, Fraction(0)) != 0:
        return False
    tight = tight_edges(G, values)
    if method not in ("auto", "enumerate", "mincut"):
        raise ValueError("unknown method {!r}".format(method))
    best = None
    if method == "mincut" or (method == "auto" and G.n > ENUMERATION_LIMIT):
        best = _max_closure_mincut(G, weights, tight)
        if best is None:
            logger.warning("capacities overflow the max-flow solver, enumerating instead")
    if best is None:
        best = _max_closure_enumerate(G, weights, tight)
    return best <= 0


def strict_multipliers_exist(G: Dag, v) -> Optional[Certificate]:
    """Certificate with u > 0 on every tight edge, if one exists."""
    values = grading_vector(G, v)
    tight = tight_edges(G, values)
    balance = [G.masses[i] * values[i] for i in range(G.n)]
    if not tight:
        if any(balance):
            return None
        return Certificate({})
    u = sympy.symbols("u0:{}".format(len(tight)))
    s = sympy.Symbol("s")
    constraints = []
    for k in range(len(tight)):
        constraints.append(u[k] >= s)
        constraints.append(u[k] >= 0)
    for i in range(G.n):
        flow = sympy.Integer(0)
        for k, e in enumerate(tight):
            a, b = G.edges[e]
            if a == i:
                flow += u[k]
            elif b == i:
                flow -= u[k]
        if flow == 0:
            if balance[i] != 0:
                return None
            continue
        constraints.append(sympy.Eq(flow, _rational(balance[i])))
    bound = sum((abs(q) for q in balance), Fraction(0)) + 1
    constraints.append(s <= _rational(bound))
    try:
        optimum, point = lpmax(s, constraints)
    except (InfeasibleLPError, UnboundedLPError):
        return None
    if optimum <= 0:
        return None
    return Certificate(
        {_edge_name(G, e): to_fraction(sympy.Rational(point[u[k]])) for k, e in enumerate(tight)}
    )


def _rational(q: Fraction) -> sympy.Rational:
    return sympy.Rational(q.numerator, q.denominator)


def _edge_name(G: Dag, e: int) -> Tuple[str, str]:
    a, b = G.edges[e]
    return G.vertices[a], G.vertices[b]


def _fluxes(G: Dag, x: np.ndarray) -> np.ndarray:
    if not G.edges:
        return np.zeros(0)
    src = np.fromiter((a for a, _ in G.edges), dtype=np.int64)
    dst = np.fromiter((b for _, b in G.edges), dtype=np.int64)
    c = np.array([float(q) for q in G.constants])
    # overflowing edges saturate at inf and leave the other fluxes finite
    with np.errstate(over="ignore"):
        return c * np.exp(x[dst] - x[src])


def _vertex_balance(G: Dag, flux: np.ndarray) -> np.ndarray:
    out = np.zeros(G.n)
    for (a, b), f in zip(G.edges, flux):
        out[a] += f
        out[b] -= f
    return out


def dag_flow_rhs(G: Dag, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = np.array([float(q) for q in G.masses])
    return _vertex_balance(G, _fluxes(G, x)) / m


def dag_flow_edge_rhs(G: Dag, y) -> np.ndarray:
    """Edge form of the flow in y_e = -(x_dst - x_src + log c_e)."""
    y = np.asarray(y, dtype=float)
    m = np.array([float(q) for q in G.masses])
    xdot = _vertex_balance(G, np.exp(-y)) / m
    return np.array([xdot[a] - xdot[b] for a, b in G.edges])


def dag_energy(G: Dag, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(_fluxes(G, x)))


def ansatz_offsets(G: Dag, v, u: Certificate, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Offsets b with x = v log t + b solving the flow up to integrable terms."""
    values = grading_vector(G, v)
    tight = tight_edges(G, values)
    for e in tight:
        if u[_edge_name(G, e)] <= 0:
            raise NoStrictCertificate(
                "multiplier on tight edge {} -> {} is not positive".format(*_edge_name(G, e))
            )
    n = G.n
    if not tight:
        return np.zeros(n)
    sub = G.subgraph(tight)
    target = np.array([float(m * x) for m, x in zip(G.masses, values)])
    uvec = np.array([float(u[_edge_name(G, e)]) for e in tight])
    src = np.array([a for a, _ in sub.edges])
    dst = np.array([b for _, b in sub.edges])
    c = np.array([float(q) for q in sub.constants])
    incidence = np.zeros((len(sub.edges), n))
    incidence[np.arange(len(src)), src] = -1.0
    incidence[np.arange(len(dst)), dst] = 1.0

    def objective(b):
        d = incidence @ b
        return float(np.sum(c * np.exp(d) - uvec * d))

    def gradient(b):
        return target - _vertex_balance(sub, c * np.exp(incidence @ b))

    b = np.zeros(n)
    for it in range(max_iter):
        g = gradient(b)
        if np.max(np.abs(g)) < tol:
            break
        hessian = incidence.T @ (np.diag(c * np.exp(incidence @ b)) @ incidence)
        step = scipy.linalg.lstsq(hessian, -g)[0]
        f0 = objective(b)
        slope = float(g @ step)
        alpha = 1.0
        while objective(b + alpha * step) > f0 + 1e-4 * alpha * slope and alpha > 1e-12:
            alpha *= 0.5
        b = b + alpha * step
    else:
        raise NonConvergence("ansatz offsets did not converge in {} Newton steps".format(max_iter))
    logger.debug("ansatz offsets converged after %d Newton steps", it)

    comp, _ = _forest_components(G, tight)
    for k in set(comp):
        members = [i for i in range(n) if comp[i] == k]
        b[members] -= b[members].mean()
    return b


def iterated_example_graph(n: int) -> Dag:
    """Doubling family: sources end in ``0``, sinks in ``1``."""
    if n < 0:
        raise InvalidGraph("n must be nonnegative")
    vertices: List[str] = ["v"]
    edges: List[Tuple[str, str]] = []
    for _ in range(n):
        doubled = [name + bit for name in vertices for bit in "01"]
        new_edges = [(name + "0", name + "1") for name in vertices]
        new_edges += [(a + "0", b + "1") for a, b in edges]
        vertices, edges = doubled, new_edges
    return Dag.from_edges(vertices, edges)
