"""The metric gradient flow h^-1 dh/dt = [h^-1 phi* h, phi] - rho.

Integration runs in log-time s = log t with an adaptive embedded Runge-Kutta
pair from scipy. States are Hermitian by construction: the solver sees the
real coordinates of the Hermitian blocks only.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.integrate
import scipy.linalg

from .config import get_settings
from .dag import Dag
from .errors import (
    InputError,
    NotSemistable,
    PositivityLost,
    ShapeMismatch,
    SingularMetric,
    StepFailure,
)
from .exact import Gaussian, to_fraction
from .staralg import Bimodule, Element, Reduction, StarAlgebra

logger = logging.getLogger(__name__)

METHODS = ("RK45", "DOP853", "Radau", "BDF", "LSODA")


@dataclass(frozen=True)
class Quadruple:
    """(B, tau, rho, M, phi), optionally restricted to a reduced level."""

    module: Bimodule
    rho: Element
    phi: Element
    reduction: Optional[Reduction] = None
    exact_masses: Optional[Tuple[Fraction, ...]] = None
    exact_theta: Optional[Tuple[Fraction, ...]] = None

    def __post_init__(self):
        A = self.module.algebra
        object.__setattr__(self, "rho", A.check(self.rho))
        object.__setattr__(self, "phi", self.module.check(self.phi))
        if A.norm(A.sub(self.rho, A.adjoint(self.rho))) > 1e-12 * max(1.0, A.norm(self.rho)):
            raise InputError("rho must be self-adjoint")

    @property
    def algebra(self) -> StarAlgebra:
        return self.module.algebra

    @classmethod
    def from_quiver(
        cls,
        vertices: Sequence[Tuple[str, int, object, object]],
        arrows: Sequence[Tuple[str, str, object]],
    ) -> "Quadruple":
        """``vertices`` as (id, dim, mass, theta), ``arrows`` as (src, dst, matrix)."""
        ids = tuple(str(v[0]) for v in vertices)
        if len(set(ids)) != len(ids):
            raise InputError("vertex ids must be unique")
        masses = tuple(to_fraction(v[2]) for v in vertices)
        theta = tuple(to_fraction(v[3]) for v in vertices)
        A = StarAlgebra(ids, tuple(int(v[1]) for v in vertices), tuple(float(m) for m in masses))
        index = {v: i for i, v in enumerate(ids)}
        try:
            pairs = tuple((index[str(a[0])], index[str(a[1])]) for a in arrows)
        except KeyError as e:
            raise InputError("arrow refers to unknown vertex {}".format(e)) from e
        M = Bimodule(A, pairs)
        phi = M.check([np.asarray(a[2], dtype=complex).reshape(s) for a, s in zip(arrows, M.shapes)])
        rho = A.central([float(q / m) for q, m in zip(theta, masses)])
        return cls(M, rho, phi, None, masses, theta)

    @classmethod
    def thin(cls, G: Dag, values: Optional[Sequence[complex]] = None, theta: Optional[Sequence] = None) -> "Quadruple":
        """One-dimensional blocks on the vertices of G; phi defaults to sqrt(c) per edge."""
        theta = tuple(Fraction(0) for _ in G.vertices) if theta is None else tuple(to_fraction(q) for q in theta)
        if len(theta) != G.n:
            raise ShapeMismatch("one theta per vertex is required")
        if values is None:
            values = [math.sqrt(float(c)) for c in G.constants]
        if len(values) != len(G.edges):
            raise ShapeMismatch("one value per edge is required")
        vertices = [(v, 1, m, q) for v, m, q in zip(G.vertices, G.masses, theta)]
        arrows = [(G.vertices[a], G.vertices[b], [[x]]) for (a, b), x in zip(G.edges, values)]
        return cls.from_quiver(vertices, arrows)

    @property
    def is_thin(self) -> bool:
        return all(d == 1 for d in self.algebra.dims)

    def project(self, b: Element) -> Element:
        return b if self.reduction is None else self.reduction.project(b)

    def support_dag(self) -> Dag:
        """Support graph of a thin representation, with c = |phi|^2 on its edges."""
        if not self.is_thin:
            raise InputError("the support graph is defined for thin representations only")
        A = self.algebra
        masses = self.exact_masses or tuple(to_fraction(m) for m in A.masses)
        edges, constants = [], []
        for x, (i, j) in zip(self.phi, self.module.arrows):
            c = abs(complex(x[0, 0])) ** 2
            if c > 0:
                edges.append((A.vertices[i], A.vertices[j]))
                constants.append(to_fraction(c))
        return Dag.from_edges(A.vertices, edges, masses, constants)

    def polarized_lattice(self):
        """Closed-subgraph lattice of the support with Z = m + i theta."""
        from .hn import Polarization
        from .lattice import subgraph_lattice

        G = self.support_dag()
        theta = self.exact_theta or tuple(
            to_fraction(float(r[0, 0].real) * m) for r, m in zip(self.rho, self.algebra.masses)
        )
        L, X = subgraph_lattice(G)
        xi = X.charges(L)
        masks = L._cache["masks"]
        charges = [
            Gaussian(xi[k], sum((theta[i] for i in range(G.n) if mask >> i & 1), Fraction(0)))
            for k, mask in enumerate(masks)
        ]
        return L, Polarization.from_charges(L, charges)

    def is_semistable(self) -> bool:
        """King semistability of phase 0, decided exactly on the subrepresentation lattice."""
        from .hn import is_semistable, z_total

        L, Z = self.polarized_lattice()
        return z_total(L, Z).im == 0 and is_semistable(L, Z)


def _positive(A: StarAlgebra, h: Element) -> bool:
    return A.min_eigenvalue(h) > 0


def flow_rhs(Q: Quadruple, h: Element, rho: Optional[Element] = None) -> Element:
    """dh/dt = h (P[h^-1 phi* h, phi] - rho)."""
    A, M, phi = Q.algebra, Q.module, Q.phi
    rho = Q.rho if rho is None else rho
    if not _positive(A, h):
        raise SingularMetric("the metric is not positive definite")
    try:
        h_inv = A.inv(h)
    except np.linalg.LinAlgError as e:
        raise SingularMetric("the metric is singular") from e
    outgoing = A.mul(h_inv, M.pair_star(phi, M.left(h, phi)))
    incoming = A.mul(M.star_pair(M.right(phi, h_inv), phi), h)
    K = Q.project(A.sub(outgoing, incoming))
    return A.hermitian_part(A.mul(h, A.sub(K, rho)))


def energy(Q: Quadruple, h: Element) -> float:
    """S(h) = sum_a tr(h_i^-1 phi_a* h_j phi_a) + tau(rho log h)."""
    A, M = Q.algebra, Q.module
    h_inv = A.inv(h)
    kinetic = sum(
        np.trace(h_inv[i] @ x.conj().T @ h[j] @ x).real for x, (i, j) in zip(Q.phi, M.arrows)
    )
    log_h = []
    for x in h:
        if not x.size:
            log_h.append(x)
            continue
        w, v = scipy.linalg.eigh(x)
        log_h.append((v * np.log(w)) @ v.conj().T)
    return float(kinetic + A.trace(A.mul(Q.rho, tuple(log_h))).real)


def metric_inner(A: StarAlgebra, h: Element, a: Element, b: Element) -> float:
    """<a, b>_h = sum_i m_i tr(h_i^-1 a_i h_i^-1 b_i)."""
    h_inv = A.inv(h)
    return float(
        sum(m * np.trace(hi @ x @ hi @ y).real for m, hi, x, y in zip(A.masses, h_inv, a, b))
    )


class HermitianCoordinates:
    """Real coordinates of a tuple of Hermitian blocks."""

    def __init__(self, A: StarAlgebra):
        self.algebra = A
        self.upper = [np.triu_indices(d, 1) for d in A.dims]
        self.size = A.dim

    def pack(self, h: Element) -> np.ndarray:
        parts = []
        for x, iu in zip(h, self.upper):
            parts.append(np.diag(x).real)
            parts.append(x[iu].real)
            parts.append(x[iu].imag)
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, y: np.ndarray) -> Element:
        out = []
        pos = 0
        for d, iu in zip(self.algebra.dims, self.upper):
            k = len(iu[0])
            x = np.zeros((d, d), dtype=complex)
            x[np.diag_indices(d)] = y[pos: pos + d]
            pos += d
            upper = y[pos: pos + k] + 1j * y[pos + k: pos + 2 * k]
            pos += 2 * k
            x[iu] = upper
            x[(iu[1], iu[0])] = upper.conj()
            out.append(x)
        return tuple(out)


@dataclass
class Trajectory:
    """Samples of a flow line on a geometric time grid."""

    times: np.ndarray
    eigenvalues: np.ndarray
    columns: Tuple[str, ...]
    states: Optional[List[Element]] = None
    energies: Optional[np.ndarray] = None
    _algebra: Optional[StarAlgebra] = field(default=None, repr=False, compare=False)

    @staticmethod
    def column_names(A: StarAlgebra) -> Tuple[str, ...]:
        return tuple("{}:{}".format(v, k) for v, d in zip(A.vertices, A.dims) for k in range(d))

    @classmethod
    def from_states(cls, A: StarAlgebra, times, states: List[Element], energies=None) -> "Trajectory":
        eig = np.array([A.eigenvalues(h) for h in states]) if states else np.zeros((0, A.dim))
        return cls(np.asarray(times, dtype=float), eig, cls.column_names(A), states, energies, A)

    @property
    def blocks(self) -> Dict[str, List[int]]:
        out: Dict[str, List[int]] = {}
        for k, name in enumerate(self.columns):
            out.setdefault(name.rsplit(":", 1)[0], []).append(k)
        return out

    def to_csv(self, path) -> None:
        header = ",".join(("t",) + tuple(self.columns))
        data = np.column_stack([self.times, self.eigenvalues]) if len(self.times) else np.zeros((0, 1 + len(self.columns)))
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.15g")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        from .schemas import TrajectoryHeader

        path = Path(path)
        with path.open() as f:
            first = f.readline().strip()
        header = TrajectoryHeader.parse(first)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size and data.shape[1] != len(header.columns) + 1:
            raise InputError("trajectory rows do not match the header")
        if not data.size:
            data = np.zeros((0, len(header.columns) + 1))
        return cls(data[:, 0], data[:, 1:], tuple(header.columns))

    def compressions(self, projectors) -> Dict[Tuple[Fraction, ...], np.ndarray]:
        """tau(p h) / tau(p) along the samples, for every labelled projector."""
        if self.states is None or self._algebra is None:
            raise InputError("projector compressions need the sampled states")
        A = self._algebra
        out = {}
        for lab, p in zip(projectors.labels, projectors.projectors):
            weight = A.trace(p).real
            out[lab] = np.array([A.trace(A.mul(p, h, p)).real / weight for h in self.states])
        return out


def _solver(method: str):
    if method not in METHODS:
        raise InputError("unknown integration method {!r}, choose from {}".format(method, ", ".join(METHODS)))
    return getattr(scipy.integrate, method)


def integrate(
    Q: Quadruple,
    h0: Element,
    t_span: Tuple[float, float],
    rtol: Optional[float] = None,
    atol: Optional[float] = None,
    samples: Optional[int] = None,
    method: str = "DOP853",
    rho_shift: Optional[Callable[[float], float]] = None,
    monitor_energy: Optional[bool] = None,
) -> Trajectory:
    """Integrate the flow in s = log t and sample it on a geometric grid.

    ``rho_shift`` replaces rho by rho - f(t) 1.
    """
    settings = get_settings()
    rtol = settings.rtol if rtol is None else rtol
    atol = settings.atol if atol is None else atol
    samples = settings.samples if samples is None else samples
    A = Q.algebra
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not (t0 > 0 and t1 > t0):
        raise InputError("t_span must satisfy 0 < t0 < t1, got {}".format((t0, t1)))
    h0 = A.check(h0)
    if not _positive(A, h0):
        raise InputError("the initial metric must be positive definite")
    coords = HermitianCoordinates(A)
    if monitor_energy is None:
        monitor_energy = Q.reduction is None and rho_shift is None

    def fun(s, y):
        t = math.exp(s)
        h = coords.unpack(y)
        dh = flow_rhs(Q, h)
        if rho_shift is not None:
            dh = A.add(dh, A.scale(rho_shift(t), h))
        return t * coords.pack(dh)

    s0, s1 = math.log(t0), math.log(t1)
    grid = np.linspace(s0, s1, samples)
    times = np.exp(grid)
    # exact endpoints, exp(log t) drifts by an ulp
    times[0], times[-1] = t0, t1
    solver = _solver(method)(fun, s0, coords.pack(h0), s1, rtol=rtol, atol=atol)
    states: List[Element] = [h0]
    energies: List[float] = [energy(Q, h0)] if monitor_energy else []
    next_sample = 1
    warned = False
    steps = 0
    while solver.status == "running":
        try:
            solver.step()
        except SingularMetric as e:
            raise PositivityLost("the metric left the positive cone near t = {:.6g}".format(math.exp(solver.t))) from e
        steps += 1
        if solver.status == "failed":
            raise StepFailure("integration failed at t = {:.6g}: {}".format(math.exp(solver.t), solver.message))
        h = coords.unpack(solver.y)
        if not _positive(A, h):
            raise PositivityLost("the metric left the positive cone at t = {:.6g}".format(math.exp(solver.t)))
        if next_sample < len(grid) and grid[next_sample] <= solver.t:
            dense = solver.dense_output()
            while next_sample < len(grid) and grid[next_sample] <= solver.t:
                hs = coords.unpack(dense(grid[next_sample]))
                states.append(hs)
                if monitor_energy:
                    e = energy(Q, hs)
                    if e > energies[-1] + 1e-8 * (1 + abs(energies[-1])) and not warned:
                        logger.warning(
                            "energy increased from %.12g to %.12g at t = %.6g",
                            energies[-1],
                            e,
                            math.exp(grid[next_sample]),
                        )
                        warned = True
                    energies.append(e)
                next_sample += 1
    logger.debug("integrated to t = %.6g in %d steps", t1, steps)
    return Trajectory.from_states(
        A, times[: len(states)], states, np.array(energies) if monitor_energy else None
    )


def relax(
    Q: Quadruple,
    h0: Optional[Element] = None,
    tol: float = 1e-10,
    t_max: float = 1e6,
    consecutive: int = 10,
) -> Element:
    """Flow to a fixed point; stops once |h^-1 dh/dt| < tol for ``consecutive`` steps."""
    A = Q.algebra
    h0 = A.identity() if h0 is None else A.check(h0)
    coords = HermitianCoordinates(A)

    def speed(h: Element) -> float:
        dh = flow_rhs(Q, h)
        return math.sqrt(max(metric_inner(A, h, dh, dh), 0.0))

    if speed(h0) < tol:
        return h0

    def fun(t, y):
        return coords.pack(flow_rhs(Q, coords.unpack(y)))

    solver = scipy.integrate.DOP853(fun, 0.0, coords.pack(h0), t_max, rtol=1e-12, atol=1e-14)
    calm = 0
    while solver.status == "running":
        try:
            solver.step()
            if solver.status == "failed":
                raise StepFailure("relaxation failed at t = {:.6g}: {}".format(solver.t, solver.message))
            h = coords.unpack(solver.y)
            calm = calm + 1 if speed(h) < tol else 0
        except SingularMetric as e:
            raise NotSemistable("relaxation degenerated at t = {:.6g}; the quadruple is not polystable".format(solver.t)) from e
        if calm >= consecutive:
            logger.debug("relaxed at t = %.6g", solver.t)
            return A.hermitian_part(h)
    raise NotSemistable("the flow did not reach a fixed point by t = {:.3g}; the quadruple is not polystable".format(t_max))


def _psd_gap(A: StarAlgebra, lower: Element, upper: Element) -> float:
    """Smallest eigenvalue of upper - lower, relative to their size."""
    scale = max(1.0, max(float(np.abs(scipy.linalg.eigvalsh(x)).max()) for x in upper if x.size))
    return A.min_eigenvalue(A.sub(upper, lower)) / scale


def _pair(Q: Quadruple, h10: Element, h20: Element, t_span, **kwargs) -> Tuple[Trajectory, Trajectory]:
    threads = min(2, get_settings().threads)
    kwargs.setdefault("monitor_energy", False)
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="monotonicity") as pool:
        futures = [pool.submit(integrate, Q, h, t_span, **kwargs) for h in (h10, h20)]
        first, second = [f.result() for f in futures]
    return first, second


def monotonicity_check(Q: Quadruple, h10: Element, h20: Element, t_span, tol: float = 1e-9, **kwargs) -> bool:
    """h1(0) <= h2(0) implies h1(t) <= h2(t) along the sampled grid."""
    A = Q.algebra
    h10, h20 = A.check(h10), A.check(h20)
    if _psd_gap(A, h10, h20) < -tol:
        raise InputError("the initial metrics are not ordered")
    first, second = _pair(Q, h10, h20, t_span, **kwargs)
    worst = min(_psd_gap(A, a, b) for a, b in zip(first.states, second.states))
    logger.debug("monotonicity: smallest relative gap %.3g", worst)
    return worst >= -tol


def sandwich_constant(A: StarAlgebra, h1: Element, h2: Element) -> float:
    """Smallest C with h1 / C <= h2 <= C h1."""
    c = 1.0
    for x, y in zip(h1, h2):
        if not x.size:
            continue
        w = scipy.linalg.eigvalsh(y, x)
        c = max(c, float(w.max()), float(1 / w.min()))
    return c


def sandwich_check(Q: Quadruple, h10: Element, h20: Element, t_span, tol: float = 1e-9, **kwargs) -> bool:
    A = Q.algebra
    C = sandwich_constant(A, A.check(h10), A.check(h20))
    first, second = _pair(Q, h10, h20, t_span, **kwargs)
    for a, b in zip(first.states, second.states):
        if _psd_gap(A, A.scale(1 / C, a), b) < -tol or _psd_gap(A, b, A.scale(C, a)) < -tol:
            return False
    return True
