"""Block *-algebras with trace, quiver *-bimodules and the harmonic reduction step.

An algebra element is a tuple of square complex matrices, one per vertex. A
bimodule element is a tuple of ``dim(dst) x dim(src)`` matrices, one per
arrow. ``vec`` coordinates are orthonormal for both trace inner products, so
operators between the two spaces are plain matrices and their adjoints are
conjugate transposes.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import InputError, NonConvergence, NotCentral, NotHarmonic, NotSemistable, ShapeMismatch
from .exact import to_fraction

logger = logging.getLogger(__name__)

Element = Tuple[np.ndarray, ...]

STRUCTURE_TOL = 1e-10
GAUGE_TOL = 1e-8
KERNEL_RTOL = 1e-9
NULL_RCOND = 1e-10


@dataclass(frozen=True)
class StarAlgebra:
    """prod End(C^{d_i}) with the trace sum_i m_i tr(b_i)."""

    vertices: Tuple[str, ...]
    dims: Tuple[int, ...]
    masses: Tuple[float, ...]

    def __post_init__(self):
        if not (len(self.vertices) == len(self.dims) == len(self.masses)):
            raise ShapeMismatch("one dimension and one trace weight per block are required")
        if any(d < 0 for d in self.dims):
            raise ShapeMismatch("block dimensions must be nonnegative")
        if any(not m > 0 for m in self.masses):
            raise InputError("trace weights must be positive")

    @property
    def dim(self) -> int:
        return sum(d * d for d in self.dims)

    def check(self, b) -> Element:
        b = tuple(np.asarray(x, dtype=complex) for x in b)
        if len(b) != len(self.dims) or any(x.shape != (d, d) for x, d in zip(b, self.dims)):
            raise ShapeMismatch(
                "algebra element needs blocks of sizes {}".format(list(self.dims))
            )
        return b

    def zero(self) -> Element:
        return tuple(np.zeros((d, d), dtype=complex) for d in self.dims)

    def identity(self) -> Element:
        return tuple(np.eye(d, dtype=complex) for d in self.dims)

    def central(self, scalars: Sequence[float]) -> Element:
        return tuple(complex(s) * np.eye(d, dtype=complex) for s, d in zip(scalars, self.dims))

    def random(self, rng: np.random.Generator, hermitian: bool = False) -> Element:
        out = []
        for d in self.dims:
            x = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            out.append((x + x.conj().T) / 2 if hermitian else x)
        return tuple(out)

    def random_positive(self, rng: np.random.Generator, spread: float = 1.0) -> Element:
        out = []
        for d in self.dims:
            x = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            out.append(x @ x.conj().T / max(d, 1) * spread + np.eye(d))
        return tuple(out)

    def trace(self, b: Element) -> complex:
        return complex(sum(m * np.trace(x) for m, x in zip(self.masses, b)))

    def inner(self, a: Element, b: Element) -> complex:
        """<a, b> = tau(a* b)."""
        return complex(sum(m * np.vdot(x, y) for m, x, y in zip(self.masses, a, b)))

    def norm(self, b: Element) -> float:
        return float(np.sqrt(max(self.inner(b, b).real, 0.0)))

    def adjoint(self, b: Element) -> Element:
        return tuple(x.conj().T for x in b)

    def add(self, a: Element, b: Element) -> Element:
        return tuple(x + y for x, y in zip(a, b))

    def sub(self, a: Element, b: Element) -> Element:
        return tuple(x - y for x, y in zip(a, b))

    def scale(self, c, b: Element) -> Element:
        return tuple(c * x for x in b)

    def mul(self, *factors: Element) -> Element:
        out = factors[0]
        for f in factors[1:]:
            out = tuple(x @ y for x, y in zip(out, f))
        return out

    def commutator(self, a: Element, b: Element) -> Element:
        return self.sub(self.mul(a, b), self.mul(b, a))

    def inv(self, b: Element) -> Element:
        return tuple(np.linalg.inv(x) if x.size else x for x in b)

    def hermitian_part(self, b: Element) -> Element:
        return tuple((x + x.conj().T) / 2 for x in b)

    def min_eigenvalue(self, h: Element) -> float:
        values = [scipy.linalg.eigvalsh(x)[0] for x in h if x.size]
        return float(min(values)) if values else np.inf

    def eigenvalues(self, h: Element) -> np.ndarray:
        return np.concatenate([scipy.linalg.eigvalsh(x) for x in h if x.size] or [np.zeros(0)])

    def power(self, h: Element, p: float) -> Element:
        """h**p for Hermitian positive definite h."""
        out = []
        for x in h:
            if not x.size:
                out.append(x)
                continue
            w, v = scipy.linalg.eigh((x + x.conj().T) / 2)
            out.append((v * w**p) @ v.conj().T)
        return tuple(out)

    def sqrt(self, h: Element) -> Element:
        return self.power(h, 0.5)

    def vec(self, b: Element) -> np.ndarray:
        if not self.dims:
            return np.zeros(0, dtype=complex)
        return np.concatenate([np.sqrt(m) * x.ravel() for m, x in zip(self.masses, b)])

    def unvec(self, v: np.ndarray) -> Element:
        out = []
        pos = 0
        for m, d in zip(self.masses, self.dims):
            out.append(np.asarray(v[pos: pos + d * d], dtype=complex).reshape(d, d) / np.sqrt(m))
            pos += d * d
        return tuple(out)


@dataclass(frozen=True)
class Bimodule:
    """Representation space sum_{a: i -> j} Hom(C^{d_i}, C^{d_j})."""

    algebra: StarAlgebra
    arrows: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        n = len(self.algebra.dims)
        for i, j in self.arrows:
            if not (0 <= i < n and 0 <= j < n):
                raise ShapeMismatch("arrow ({}, {}) leaves the vertex set".format(i, j))

    @property
    def shapes(self) -> Tuple[Tuple[int, int], ...]:
        d = self.algebra.dims
        return tuple((d[j], d[i]) for i, j in self.arrows)

    @property
    def dim(self) -> int:
        return sum(r * c for r, c in self.shapes)

    def check(self, m) -> Element:
        m = tuple(np.asarray(x, dtype=complex) for x in m)
        if len(m) != len(self.arrows) or any(x.shape != s for x, s in zip(m, self.shapes)):
            raise ShapeMismatch("bimodule element needs matrices of shapes {}".format(list(self.shapes)))
        return m

    def zero(self) -> Element:
        return tuple(np.zeros(s, dtype=complex) for s in self.shapes)

    def random(self, rng: np.random.Generator) -> Element:
        return tuple(rng.standard_normal(s) + 1j * rng.standard_normal(s) for s in self.shapes)

    def inner(self, a: Element, b: Element) -> complex:
        """tau(a* b); the 1/m_i of the pairing cancels the trace weight."""
        return complex(sum(np.vdot(x, y) for x, y in zip(a, b)))

    def norm(self, m: Element) -> float:
        return float(np.sqrt(max(self.inner(m, m).real, 0.0)))

    def add(self, a: Element, b: Element) -> Element:
        return tuple(x + y for x, y in zip(a, b))

    def sub(self, a: Element, b: Element) -> Element:
        return tuple(x - y for x, y in zip(a, b))

    def scale(self, c, m: Element) -> Element:
        return tuple(c * x for x in m)

    def left(self, b: Element, m: Element) -> Element:
        return tuple(b[j] @ x for x, (i, j) in zip(m, self.arrows))

    def right(self, m: Element, b: Element) -> Element:
        return tuple(x @ b[i] for x, (i, j) in zip(m, self.arrows))

    def conjugate(self, g: Element, m: Element, g_inv: Optional[Element] = None) -> Element:
        """g m g^-1."""
        g_inv = self.algebra.inv(g) if g_inv is None else g_inv
        return tuple(g[j] @ x @ g_inv[i] for x, (i, j) in zip(m, self.arrows))

    def pair_star(self, phi: Element, psi: Element) -> Element:
        """phi* psi, living on source blocks."""
        A = self.algebra
        out = list(A.zero())
        for x, y, (i, j) in zip(phi, psi, self.arrows):
            out[i] = out[i] + x.conj().T @ y / A.masses[i]
        return tuple(out)

    def star_pair(self, phi: Element, psi: Element) -> Element:
        """phi psi*, living on target blocks."""
        A = self.algebra
        out = list(A.zero())
        for x, y, (i, j) in zip(phi, psi, self.arrows):
            out[j] = out[j] + x @ y.conj().T / A.masses[j]
        return tuple(out)

    def vec(self, m: Element) -> np.ndarray:
        if not self.arrows:
            return np.zeros(0, dtype=complex)
        return np.concatenate([x.ravel() for x in m])

    def unvec(self, v: np.ndarray) -> Element:
        out = []
        pos = 0
        for r, c in self.shapes:
            out.append(np.asarray(v[pos: pos + r * c], dtype=complex).reshape(r, c))
            pos += r * c
        return tuple(out)


def commutator(M: Bimodule, phi: Element, b: Element) -> Element:
    """[phi, b] = phi b - b phi, blockwise phi_a b_i - b_j phi_a."""
    return M.sub(M.right(phi, b), M.left(b, phi))


def adjoint_commutator(M: Bimodule, phi: Element, m: Element) -> Element:
    """[phi*, m] = phi* m - m phi*, the adjoint of b -> [phi, b]."""
    return M.algebra.sub(M.pair_star(phi, m), M.star_pair(m, phi))


def moment(M: Bimodule, phi: Element) -> Element:
    return adjoint_commutator(M, phi, phi)


def laplacian(M: Bimodule, phi0: Element, b: Element) -> Element:
    return adjoint_commutator(M, phi0, commutator(M, phi0, b))


def _operator_matrix(op: Callable, n: int, unvec: Callable, vec: Callable) -> np.ndarray:
    cols = []
    for k in range(n):
        e = np.zeros(n, dtype=complex)
        e[k] = 1.0
        cols.append(vec(op(unvec(e))))
    if not cols:
        return np.zeros((0, 0), dtype=complex)
    return np.column_stack(cols)


def commutator_matrix(M: Bimodule, phi: Element) -> np.ndarray:
    A = M.algebra
    return _operator_matrix(lambda b: commutator(M, phi, b), A.dim, A.unvec, M.vec).reshape(M.dim, A.dim)


def laplacian_matrix(M: Bimodule, phi0: Element, basis: Optional[np.ndarray] = None) -> np.ndarray:
    """Delta in vec coordinates, compressed to ``basis`` when one is given."""
    C = commutator_matrix(M, phi0)
    D = C.conj().T @ C
    if basis is not None:
        D = basis.conj().T @ D @ basis
    return (D + D.conj().T) / 2


def algebra_commutator_matrix(A: StarAlgebra, r: Element) -> np.ndarray:
    return _operator_matrix(lambda b: A.commutator(r, b), A.dim, A.unvec, A.vec).reshape(A.dim, A.dim)


def module_degree_matrix(M: Bimodule, r: Element) -> np.ndarray:
    """m -> r m - m r, the grading operator of r on the bimodule."""
    return _operator_matrix(lambda m: M.sub(M.left(r, m), M.right(m, r)), M.dim, M.unvec, M.vec).reshape(
        M.dim, M.dim
    )


def is_central(A: StarAlgebra, c: Element, basis: Optional[np.ndarray] = None, tol: float = STRUCTURE_TOL) -> bool:
    """c commutes with the level algebra spanned by ``basis`` (all of A by default)."""
    scale = max(1.0, A.norm(c))
    if basis is None:
        for x in c:
            d = x.shape[0]
            if d and np.linalg.norm(x - np.trace(x) / d * np.eye(d)) > tol * scale:
                return False
        return True
    for u in basis.T:
        if A.norm(A.commutator(c, A.unvec(u))) > tol * scale:
            return False
    return True


@dataclass(frozen=True)
class Reduction:
    """A level (B', tau', M', rho', phi') of the harmonic reduction.

    B' and M' are kept inside the ambient algebra and bimodule as orthonormal
    bases in vec coordinates; tau' is the restriction of tau, and pairings of
    M' land in B' after ``project``.
    """

    module: Bimodule
    algebra_basis: np.ndarray
    module_basis: np.ndarray
    rho: Element
    phi: Element

    @classmethod
    def full(cls, M: Bimodule, rho: Optional[Element] = None, phi: Optional[Element] = None) -> "Reduction":
        A = M.algebra
        return cls(
            M,
            np.eye(A.dim, dtype=complex),
            np.eye(M.dim, dtype=complex),
            A.zero() if rho is None else A.check(rho),
            M.zero() if phi is None else M.check(phi),
        )

    @property
    def algebra(self) -> StarAlgebra:
        return self.module.algebra

    @property
    def is_full(self) -> bool:
        return self.algebra_basis.shape[1] == self.algebra.dim and self.module_basis.shape[1] == self.module.dim

    @property
    def projector(self) -> np.ndarray:
        U = self.algebra_basis
        return U @ U.conj().T

    def project(self, b: Element) -> Element:
        if self.is_full:
            return b
        A = self.algebra
        U = self.algebra_basis
        return A.unvec(U @ (U.conj().T @ A.vec(b)))

    def project_module(self, m: Element) -> Element:
        if self.is_full:
            return m
        M = self.module
        V = self.module_basis
        return M.unvec(V @ (V.conj().T @ M.vec(m)))

    def contains(self, b: Element, tol: float = STRUCTURE_TOL) -> bool:
        A = self.algebra
        return A.norm(A.sub(b, self.project(b))) <= tol * max(1.0, A.norm(b))

    def random(self, rng: np.random.Generator) -> Element:
        U = self.algebra_basis
        k = U.shape[1]
        return self.algebra.unvec(U @ (rng.standard_normal(k) + 1j * rng.standard_normal(k)))


@dataclass(frozen=True)
class GreenOperator:
    """Kernel projector P and pseudo-inverse G of Delta on a level algebra."""

    algebra: StarAlgebra
    laplacian: np.ndarray
    kernel_projector: np.ndarray
    green: np.ndarray
    space: np.ndarray

    def _apply(self, op: np.ndarray, b: Element) -> Element:
        return self.algebra.unvec(op @ self.algebra.vec(b))

    def P(self, b: Element) -> Element:
        return self._apply(self.kernel_projector, b)

    def G(self, b: Element) -> Element:
        return self._apply(self.green, b)

    def Delta(self, b: Element) -> Element:
        return self._apply(self.laplacian, b)

    def residuals(self) -> Dict[str, float]:
        P, G, D, one = self.kernel_projector, self.green, self.laplacian, self.space
        return {
            "P+DG": float(np.linalg.norm(P + D @ G - one, 2)) if one.size else 0.0,
            "P+GD": float(np.linalg.norm(P + G @ D - one, 2)) if one.size else 0.0,
            "PG": float(np.linalg.norm(P @ G, 2)) if one.size else 0.0,
            "GP": float(np.linalg.norm(G @ P, 2)) if one.size else 0.0,
        }


def green_operator(
    M: Bimodule,
    phi0: Element,
    level: Optional[Reduction] = None,
    rtol: float = KERNEL_RTOL,
    tol: float = STRUCTURE_TOL,
) -> GreenOperator:
    A = M.algebra
    level = level or Reduction.full(M)
    mu = level.project(moment(M, phi0))
    if not is_central(A, mu, None if level.is_full else level.algebra_basis, tol):
        raise NotCentral("[phi0*, phi0] is not central in the level algebra")
    U = level.algebra_basis
    D = laplacian_matrix(M, phi0, U)
    w, V = scipy.linalg.eigh(D) if D.size else (np.zeros(0), np.zeros((0, 0)))
    top = float(np.max(np.abs(w))) if w.size else 0.0
    kernel = w <= rtol * top if top > 0 else np.ones(w.shape, dtype=bool)
    Vk, Vn = V[:, kernel], V[:, ~kernel]
    P_small = Vk @ Vk.conj().T
    G_small = (Vn / w[~kernel]) @ Vn.conj().T
    logger.debug("Laplacian of rank %d on a level algebra of dimension %d", int((~kernel).sum()), U.shape[1])
    return GreenOperator(
        A,
        U @ D @ U.conj().T,
        U @ P_small @ U.conj().T,
        U @ G_small @ U.conj().T,
        U @ U.conj().T,
    )


@dataclass(frozen=True)
class GradedProjectors:
    """Orthogonal resolution of the identity indexed by exponent sequences."""

    algebra: StarAlgebra
    labels: Tuple[Tuple[Fraction, ...], ...]
    projectors: Tuple[Element, ...]
    _groups: Dict[int, Dict[Fraction, Element]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.labels) != len(self.projectors):
            raise ShapeMismatch("one projector per label is required")
        labels = tuple(tuple(to_fraction(q) for q in lab) for lab in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise InputError("projector labels must be distinct")
        if len({len(lab) for lab in labels}) > 1:
            raise InputError("all exponent sequences must have the same length")
        object.__setattr__(self, "projectors", tuple(self.algebra.check(p) for p in self.projectors))

    @classmethod
    def trivial(cls, A: StarAlgebra) -> "GradedProjectors":
        return cls(A, ((),), (A.identity(),))

    @classmethod
    def thin(cls, A: StarAlgebra, vertex_labels: Sequence[Sequence]) -> "GradedProjectors":
        """Diagonal projectors for representations with all blocks one-dimensional."""
        if any(d != 1 for d in A.dims):
            raise ShapeMismatch("thin projectors need one-dimensional blocks")
        by_label: Dict[Tuple[Fraction, ...], list] = {}
        for i, lab in enumerate(vertex_labels):
            by_label.setdefault(tuple(to_fraction(q) for q in lab), []).append(i)
        labels = tuple(sorted(by_label))
        projectors = tuple(
            A.central([1.0 if i in by_label[lab] else 0.0 for i in range(len(A.dims))]) for lab in labels
        )
        return cls(A, labels, projectors)

    @property
    def depth(self) -> int:
        return len(self.labels[0]) if self.labels else 0

    def validate(self, tol: float = STRUCTURE_TOL) -> None:
        A = self.algebra
        total = A.zero()
        for k, p in enumerate(self.projectors):
            if A.norm(A.sub(p, A.adjoint(p))) > tol or A.norm(A.sub(A.mul(p, p), p)) > tol:
                raise InputError("label {} does not carry an orthogonal projector".format(self.labels[k]))
            for q in self.projectors[k + 1:]:
                if A.norm(A.mul(p, q)) > tol:
                    raise InputError("projectors are not mutually orthogonal")
            total = A.add(total, p)
        if A.norm(A.sub(total, A.identity())) > tol * max(1.0, A.norm(A.identity())):
            raise InputError("projectors do not sum to the identity")

    def groups(self, level: int) -> Dict[Fraction, Element]:
        """Projectors merged by the ``level``-th exponent; one group past the depth."""
        if level in self._groups:
            return self._groups[level]
        A = self.algebra
        if level >= self.depth:
            out = {Fraction(0): A.identity()}
        else:
            out = {}
            for lab, p in zip(self.labels, self.projectors):
                key = lab[level]
                out[key] = A.add(out[key], p) if key in out else p
        self._groups[level] = out
        return out

    def r(self, level: int) -> Element:
        A = self.algebra
        out = A.zero()
        for lam, p in self.groups(level).items():
            out = A.add(out, A.scale(float(lam), p))
        return out

    def block_exponents(self) -> Tuple[Tuple[Tuple[Fraction, ...], ...], ...]:
        """Per block, the exponent sequence of every eigenvector, repeated by rank."""
        out = []
        for i, d in enumerate(self.algebra.dims):
            seq = []
            for lab, p in zip(self.labels, self.projectors):
                rank = int(round(np.trace(p[i]).real)) if d else 0
                seq.extend([lab] * rank)
            out.append(tuple(sorted(seq)))
        return tuple(out)


def graded_components(M: Bimodule, phi: Element, projectors: GradedProjectors, level: int) -> Dict[Fraction, Element]:
    """phi_delta = sum_mu p_{mu+delta} phi p_mu, for the ``level``-th exponent."""
    groups = projectors.groups(level)
    out: Dict[Fraction, Element] = {}
    for mu, p in groups.items():
        for nu, q in groups.items():
            piece = tuple(p[j] @ x @ q[i] for x, (i, j) in zip(phi, M.arrows))
            if M.norm(piece) == 0.0:
                continue
            delta = mu - nu
            out[delta] = M.add(out[delta], piece) if delta in out else piece
    return out


def algebra_components(A: StarAlgebra, b: Element, projectors: GradedProjectors, level: int) -> Dict[Fraction, Element]:
    groups = projectors.groups(level)
    out: Dict[Fraction, Element] = {}
    for mu, p in groups.items():
        for nu, q in groups.items():
            piece = A.mul(p, b, q)
            if A.norm(piece) == 0.0:
                continue
            delta = mu - nu
            out[delta] = A.add(out[delta], piece) if delta in out else piece
    return out


def reduce(
    M: Bimodule,
    phi0: Element,
    phi_minus1: Element,
    r: Element,
    level: Optional[Reduction] = None,
    tol: float = STRUCTURE_TOL,
) -> Reduction:
    """Harmonic r-degree 0 part of B and harmonic r-degree -1 part of M."""
    A = M.algebra
    level = level or Reduction.full(M)
    mu = level.project(moment(M, phi0))
    if not is_central(A, mu, None if level.is_full else level.algebra_basis, tol):
        raise NotCentral("[phi0*, phi0] is not central in the level algebra")
    defect = level.project(adjoint_commutator(M, phi0, phi_minus1))
    if A.norm(defect) > tol * max(1.0, M.norm(phi0) * M.norm(phi_minus1)):
        raise NotHarmonic("[phi0*, phi_-1] = {:.3g} is not zero".format(A.norm(defect)))

    U0, V0 = level.algebra_basis, level.module_basis
    K = np.vstack([algebra_commutator_matrix(A, r) @ U0, commutator_matrix(M, phi0) @ U0])
    U = U0 @ scipy.linalg.null_space(K, rcond=NULL_RCOND) if K.size else U0
    C_adj = commutator_matrix(M, phi0).conj().T
    K2 = np.vstack(
        [
            (module_degree_matrix(M, r) + np.eye(M.dim)) @ V0,
            level.projector @ C_adj @ V0,
        ]
    )
    V = V0 @ scipy.linalg.null_space(K2, rcond=NULL_RCOND) if K2.size else V0
    phi = M.unvec(V @ (V.conj().T @ M.vec(phi_minus1))) if V.size else M.zero()
    reduced = Reduction(M, U, V, A.check(r), phi)
    if logger.isEnabledFor(logging.DEBUG):
        for u in U.T:
            b = A.unvec(u)
            assert reduced.contains(A.adjoint(b), 1e-8), "reduced algebra is not closed under *"
    logger.debug("reduced algebra of dimension %d, reduced bimodule of dimension %d", U.shape[1], V.shape[1])
    return reduced


@dataclass(frozen=True)
class GaugeFix:
    phi: Element
    g: Element
    residuals: Dict[str, float]


def gauge_residuals(
    M: Bimodule,
    rho: Element,
    phi: Element,
    projectors: GradedProjectors,
    level: int = 0,
    within: Optional[Reduction] = None,
) -> Dict[str, float]:
    """Sizes of the gap, moment-map and harmonicity defects."""
    A = M.algebra
    within = within or Reduction.full(M)
    comps = graded_components(M, phi, projectors, level)
    phi0 = comps.get(Fraction(0), M.zero())
    gap = max((M.norm(c) for d, c in comps.items() if -1 < d < 0), default=0.0)
    moment_defect = A.norm(A.sub(within.project(moment(M, phi0)), rho))
    harmonic = max(
        (A.norm(within.project(adjoint_commutator(M, phi0, c))) for d, c in comps.items() if d <= -1),
        default=0.0,
    )
    positive = max((M.norm(c) for d, c in comps.items() if d > 0), default=0.0)
    return {"gap": gap, "moment": moment_defect, "harmonic": harmonic, "positive": positive}


def _gap_correction(M: Bimodule, phi0: Element, target: Element, within: Reduction) -> Element:
    """Least-norm n in the level algebra with [phi0, n] closest to ``target``."""
    A = M.algebra
    U = within.algebra_basis
    C = commutator_matrix(M, phi0) @ U
    if not C.size:
        return A.zero()
    coeffs, *_ = scipy.linalg.lstsq(C, M.vec(target), cond=NULL_RCOND)
    return A.unvec(U @ coeffs)


def _harmonize(
    M: Bimodule,
    phi: Element,
    g: Element,
    projectors: GradedProjectors,
    level: int,
    within: Reduction,
    select: Callable[[Fraction], bool],
    tol: float,
    green: Optional[GreenOperator] = None,
) -> Tuple[Element, Element]:
    """Conjugate by 1 + n degree by degree from the top.

    With a Green operator, n = G[phi0*, phi_d] leaves phi_d harmonic. Without
    one, n solves [phi0, n] = phi_d by least squares and phi_d is removed.
    """
    A = M.algebra
    comps = graded_components(M, phi, projectors, level)
    phi0 = comps.get(Fraction(0), M.zero())
    scale = max(1.0, M.norm(phi))

    def defect(c: Element) -> float:
        if green is None:
            return M.norm(c)
        return A.norm(within.project(adjoint_commutator(M, phi0, c)))

    done = set()
    for _ in range(4 * len(projectors.labels) ** 2 + 8):
        comps = graded_components(M, phi, projectors, level)
        todo = [d for d, c in comps.items() if d not in done and select(d) and defect(c) > tol * scale]
        if not todo:
            return phi, g
        d = max(todo)
        if green is None:
            n = _gap_correction(M, phi0, comps[d], within)
        else:
            n = green.G(within.project(adjoint_commutator(M, phi0, comps[d])))
        n = algebra_components(A, n, projectors, level).get(d, A.zero())
        step = A.add(A.identity(), n)
        phi = M.conjugate(step, phi)
        g = A.mul(step, g)
        done.add(d)
        logger.debug("corrected degree %s by a step of size %.3g", d, A.norm(n))
    raise NonConvergence("graded corrections did not settle")


def gauge_fix(
    M: Bimodule,
    rho: Element,
    phi: Element,
    projectors: GradedProjectors,
    level: int = 0,
    within: Optional[Reduction] = None,
    tol: float = GAUGE_TOL,
) -> GaugeFix:
    """Conjugate phi into the normal form the asymptotic recursion needs.

    Splits off the components of degree in (-1, 0) by least squares, solves
    [phi0*, phi0] = rho by flowing the degree-0 part to its fixed point, then
    makes the components of degree <= -1 harmonic with the Green operator of
    the normalized phi0. Past the last level the whole of phi has degree 0.
    """
    from .flow import Quadruple, relax

    A = M.algebra
    within = within or Reduction.full(M)
    phi = M.check(phi)
    rho = A.check(rho)
    comps = graded_components(M, phi, projectors, level)
    scale = max(1.0, M.norm(phi))
    positive = [d for d, c in comps.items() if d > 0 and M.norm(c) > tol * scale]
    if positive:
        raise NotSemistable(
            "phi has components of positive degree {}; the filtration steps are not subrepresentations".format(
                [str(d) for d in sorted(positive)]
            )
        )
    g = A.identity()
    phi, g = _harmonize(M, phi, g, projectors, level, within, lambda d: -1 < d < 0, tol)

    phi0 = graded_components(M, phi, projectors, level).get(Fraction(0), M.zero())
    h = relax(Quadruple(M, rho, phi0, within))
    root = A.sqrt(h)
    phi = M.conjugate(root, phi)
    g = A.mul(root, g)

    comps = graded_components(M, phi, projectors, level)
    if any(d <= -1 for d in comps):
        green = green_operator(M, comps.get(Fraction(0), M.zero()), within, tol=tol)
        phi, g = _harmonize(M, phi, g, projectors, level, within, lambda d: d <= -1, tol, green)
    residuals = gauge_residuals(M, rho, phi, projectors, level, within)
    worst = max(residuals.values())
    if worst > tol * scale:
        logger.warning("gauge equations hold only up to %.3g (%s)", worst, residuals)
    return GaugeFix(phi, g, residuals)
