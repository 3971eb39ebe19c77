"""Closed-form asymptotic solutions of the flow and their residuals.

The solution is built level by level: gauge fix, split phi by degree, reduce
to the harmonic degree -1 part, and recurse until the reduced quadruple has a
constant solution. Unwinding replaces the time of level k+1 by log of the
time of level k and attaches the Green's operator correction.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import mpmath
import numpy as np
import scipy.integrate
import scipy.linalg
import sympy

from .config import get_settings
from .errors import DepthExceeded, InputError, NotSemistable
from .exact import format_fraction, to_fraction
from .flow import Quadruple
from .hn import semistable_sublattice, z_total
from .hn import is_semistable as lattice_is_semistable
from .staralg import (
    Bimodule,
    Element,
    GradedProjectors,
    GreenOperator,
    Reduction,
    StarAlgebra,
    gauge_fix,
    graded_components,
    green_operator,
    reduce,
)
from .weight import IteratedFiltration, iterated_weight_filtration

logger = logging.getLogger(__name__)

T = sympy.Symbol("t", positive=True)

SNAP_TOL = 1e-10
SNAP_OPS = 12
RESIDUAL_DPS = 50
ZERO_RESIDUAL = 1e-25
RESIDUAL_SPAN = (1e4, 1e40)
T_LIMIT = 1e40

SymElement = Tuple[sympy.Matrix, ...]


def iterated_log(t: float, k: int) -> float:
    for _ in range(k):
        t = math.log(t)
    return t


def iterated_exp(k: int, start: float = 0.0) -> float:
    """Smallest t with log^(k) t > start."""
    for _ in range(k):
        start = math.exp(start)
    return start


@lru_cache(maxsize=None)
def log_symbol(k: int) -> sympy.Symbol:
    """Positive stand-in for log^(k) t while building; t itself for k = 0."""
    return T if k == 0 else sympy.Symbol("_log{}".format(k), positive=True)


def log_expression(k: int) -> sympy.Expr:
    expr = T
    for _ in range(k):
        expr = sympy.log(expr)
    return expr


def _expand_logs(expr, depth: int):
    return expr.xreplace({log_symbol(k): log_expression(k) for k in range(1, depth + 1)})


@lru_cache(maxsize=4096)
def _snap_real(value: float) -> sympy.Expr:
    if abs(value) < SNAP_TOL:
        return sympy.Integer(0)
    guess = sympy.nsimplify(value, tolerance=SNAP_TOL, rational=False)
    if sympy.count_ops(guess) <= SNAP_OPS and abs(float(guess) - value) <= SNAP_TOL * max(1.0, abs(value)):
        return guess
    return sympy.Float(value, 17)


def snap(value) -> sympy.Expr:
    """Closed form of a float constant when a short one exists within 1e-10."""
    z = complex(value)
    return _snap_real(z.real) + sympy.I * _snap_real(z.imag)


def to_symbolic(b: Element) -> SymElement:
    return tuple(sympy.Matrix(x.shape[0], x.shape[1], [snap(v) for v in x.ravel()]) for x in b)


def _identity(A: StarAlgebra) -> SymElement:
    return tuple(sympy.eye(d) for d in A.dims)


def _mul(*factors: SymElement) -> SymElement:
    out = factors[0]
    for f in factors[1:]:
        out = tuple(x * y for x, y in zip(out, f))
    return out


def _inv(b: SymElement) -> SymElement:
    out = []
    for x in b:
        if x.shape[0] == 0:
            out.append(x)
        elif x.shape[0] == 1:
            out.append(sympy.Matrix([[1 / x[0, 0]]]))
        else:
            out.append(x.inv())
    return tuple(out)


def _conjugate(M: Bimodule, y: SymElement, y_inv: SymElement, m: SymElement) -> SymElement:
    return tuple(y[j] * x * y_inv[i] for x, (i, j) in zip(m, M.arrows))


def _moment(M: Bimodule, masses: Sequence[sympy.Expr], psi: SymElement) -> SymElement:
    out = [sympy.zeros(d, d) for d in M.algebra.dims]
    for x, (i, j) in zip(psi, M.arrows):
        if x.shape[0] == 0 or x.shape[1] == 0:
            continue
        out[i] += x.H * x / masses[i]
        out[j] -= x * x.H / masses[j]
    return tuple(out)


class _Operator:
    """A vec-coordinate operator on the algebra, applied to symbolic elements."""

    def __init__(self, A: StarAlgebra, op: np.ndarray):
        self.algebra = A
        weights = np.concatenate([np.full(d * d, math.sqrt(m)) for m, d in zip(A.masses, A.dims)] or [np.zeros(0)])
        raw = op / weights[:, None] * weights[None, :] if op.size else op
        self.entries = [
            [(int(c), snap(raw[r, c])) for c in np.flatnonzero(np.abs(raw[r]) > SNAP_TOL)] for r in range(raw.shape[0])
        ]

    def __call__(self, b: SymElement) -> SymElement:
        flat = [v for x in b for v in x]
        values = [sympy.Add(*[w * flat[c] for c, w in row]) for row in self.entries]
        out = []
        pos = 0
        for d in self.algebra.dims:
            out.append(sympy.Matrix(d, d, values[pos: pos + d * d]))
            pos += d * d
        return tuple(out)


def _grading_power(A: StarAlgebra, groups: Mapping[Fraction, Element], s: sympy.Expr) -> SymElement:
    """s^(r/2) for r = sum lambda p_lambda."""
    out = tuple(sympy.zeros(d, d) for d in A.dims)
    for lam, p in groups.items():
        power = s ** (sympy.Rational(lam.numerator, lam.denominator) / 2)
        out = tuple(x + power * q for x, q in zip(out, to_symbolic(p)))
    return out


def _tidy(b: SymElement) -> SymElement:
    return tuple(x.applyfunc(sympy.powsimp) for x in b)


def thin_filtration(Q: Quadruple, max_depth: Optional[int] = None) -> Tuple[GradedProjectors, IteratedFiltration]:
    """Iterated weight filtration of a thin representation as vertex projectors.

    Each vertex gets the exponent sequence of the first filtration step that
    contains it.
    """
    L, Z = Q.polarized_lattice()
    if z_total(L, Z).im != 0 or not lattice_is_semistable(L, Z):
        raise NotSemistable("the subrepresentation lattice is not semistable of phase 0")
    sub, X = semistable_sublattice(L, Z)
    filtration = iterated_weight_filtration(sub, X, max_depth)
    vertices = Q.algebra.vertices
    labels: Dict[str, Tuple[Fraction, ...]] = {}
    for members, lab in filtration.flattened():
        for v in members:
            labels.setdefault(v, lab)
    missing = [v for v in vertices if v not in labels]
    if missing:
        raise NotSemistable("vertices {} lie outside the filtration".format(missing))
    logger.info("thin filtration of depth %d", filtration.depth)
    return GradedProjectors.thin(Q.algebra, [labels[v] for v in vertices]), filtration


@dataclass(frozen=True)
class AsymptoticLevel:
    r: Element
    within: Reduction
    green: GreenOperator


@dataclass
class AsymptoticForm:
    """x(t) with h = x* x, and the filtration whose labels give its growth."""

    module: Bimodule
    projectors: GradedProjectors
    x: SymElement
    h: SymElement
    gauge: Element
    corrections: Tuple[SymElement, ...] = ()

    @property
    def algebra(self) -> StarAlgebra:
        return self.module.algebra

    @property
    def depth(self) -> int:
        return self.projectors.depth

    @property
    def exponents(self) -> Tuple[Tuple[Fraction, ...], ...]:
        return self.projectors.labels

    @classmethod
    def thin(
        cls,
        Q: Quadruple,
        expressions: Mapping[str, Union[str, sympy.Expr]],
        projectors: Optional[GradedProjectors] = None,
    ) -> "AsymptoticForm":
        """A candidate given as one closed form in t per vertex of a thin quadruple."""
        A = Q.algebra
        if not Q.is_thin:
            raise InputError("closed forms per vertex need a thin quadruple")
        h = []
        for v in A.vertices:
            if v not in expressions:
                raise InputError("no closed form for vertex {}".format(v))
            expr = expressions[v]
            if isinstance(expr, str):
                try:
                    expr = sympy.sympify(expr, locals={"t": T})
                except (sympy.SympifyError, SyntaxError, TypeError) as e:
                    raise InputError("cannot parse {!r}".format(expressions[v])) from e
            h.append(sympy.Matrix([[expr]]))
        x = tuple(sympy.Matrix([[sympy.sqrt(b[0, 0])]]) for b in h)
        return cls(Q.module, projectors or GradedProjectors.trivial(A), x, tuple(h), A.identity())

    def _numeric(self, blocks: SymElement):
        fns = [sympy.lambdify(T, list(b), "numpy") for b in blocks]

        def evaluate(t: float) -> Element:
            out = []
            for f, b in zip(fns, blocks):
                values = np.asarray(f(t), dtype=complex) if b.shape[0] else np.zeros(0, dtype=complex)
                out.append(values.reshape(b.shape))
            return tuple(out)

        return evaluate

    def evaluate(self, t: float) -> Element:
        if not hasattr(self, "_h_fn"):
            self._h_fn = self._numeric(self.h)
        return self._h_fn(float(t))

    def evaluate_x(self, t: float) -> Element:
        if not hasattr(self, "_x_fn"):
            self._x_fn = self._numeric(self.x)
        return self._x_fn(float(t))

    def is_positive(self, t: float) -> bool:
        try:
            h = self.evaluate(t)
        except (ValueError, ZeroDivisionError, FloatingPointError):
            return False
        if not all(np.all(np.isfinite(b)) for b in h):
            return False
        return self.algebra.min_eigenvalue(self.algebra.hermitian_part(h)) > 0

    def threshold(self, points: int = 400) -> float:
        """First point of a geometric grid past which h stays positive definite."""
        start = iterated_exp(max(self.depth, 1), 1.0)
        grid = np.geomspace(start, T_LIMIT, points)
        with np.errstate(all="ignore"):
            bad = [k for k, t in enumerate(grid) if not self.is_positive(t)]
        if not bad:
            return float(grid[0])
        if bad[-1] == len(grid) - 1:
            return math.inf
        return float(grid[bad[-1] + 1])

    def leading(self) -> SymElement:
        """g* (sum_lambda prod_k (log^(k) t)^lambda_(k+1) p_lambda) g."""
        A = self.algebra
        total = tuple(sympy.zeros(d, d) for d in A.dims)
        for lab, p in zip(self.projectors.labels, self.projectors.projectors):
            weight = sympy.Integer(1)
            for k, lam in enumerate(lab):
                weight *= log_expression(k) ** sympy.Rational(lam.numerator, lam.denominator)
            total = tuple(x + weight * q for x, q in zip(total, to_symbolic(p)))
        g = to_symbolic(self.gauge)
        return tuple(y.H * x * y for x, y in zip(total, g))

    def terms(self) -> List[dict]:
        out = []
        for lab, p in zip(self.projectors.labels, self.projectors.projectors):
            rank = int(round(sum(np.trace(b).real for b in p)))
            support = [v for v, b in zip(self.algebra.vertices, p) if b.size and np.trace(b).real > 0.5]
            out.append({"exponents": [format_fraction(q) for q in lab], "projector_rank": rank, "vertices": support})
        return out


def build_asymptotic_solution(
    Q: Quadruple,
    projectors: Optional[GradedProjectors] = None,
    max_depth: Optional[int] = None,
) -> AsymptoticForm:
    """Closed-form solution, up to an integrable error, of the flow of Q."""
    if Q.reduction is not None:
        raise InputError("asymptotic solutions are built from an unreduced quadruple")
    max_depth = get_settings().max_depth if max_depth is None else max_depth
    A, M = Q.algebra, Q.module
    if projectors is None:
        if not Q.is_thin:
            raise InputError("non-thin quadruples need their iterated weight filtration as projectors")
        projectors, _ = thin_filtration(Q, max_depth)
    elif projectors.algebra != A:
        raise InputError("projectors belong to a different algebra")
    projectors.validate()
    depth = projectors.depth
    if depth > max_depth:
        raise DepthExceeded("filtration depth {} exceeds the cap {}".format(depth, max_depth))

    rho, phi = Q.rho, Q.phi
    within = Reduction.full(M, rho, phi)
    g_total = A.identity()
    phis: List[Element] = []
    levels: List[AsymptoticLevel] = []
    for level in range(depth + 1):
        fix = gauge_fix(M, rho, phi, projectors, level, within)
        g_inv = A.inv(fix.g)
        g_total = A.mul(fix.g, g_total)
        phis = [M.conjugate(fix.g, p, g_inv) for p in phis]
        phi = fix.phi
        phis.append(phi)
        if level == depth:
            break
        comps = graded_components(M, phi, projectors, level)
        phi0 = comps.get(Fraction(0), M.zero())
        phi_m1 = comps.get(Fraction(-1), M.zero())
        green = green_operator(M, phi0, within)
        r = projectors.r(level)
        levels.append(AsymptoticLevel(r, within, green))
        within = reduce(M, phi0, phi_m1, r, within)
        phi, rho = within.phi, r
        logger.info(
            "level %d: reduced algebra of dimension %d, reduced bimodule of dimension %d",
            level + 1,
            within.algebra_basis.shape[1],
            within.module_basis.shape[1],
        )

    masses = [snap(m) for m in A.masses]
    x = _identity(A)
    corrections: List[SymElement] = []
    for level in reversed(range(depth)):
        data = levels[level]
        following = levels[level + 1].within if level + 1 < depth else within
        phi_m1 = graded_components(M, phis[level], projectors, level).get(Fraction(-1), M.zero())
        phi_m1 = to_symbolic(following.project_module(phi_m1))
        y = _mul(_grading_power(A, projectors.groups(level), log_symbol(level)), x)
        y_inv = _inv(y)
        k = _moment(M, masses, _conjugate(M, y, y_inv, phi_m1))
        if not data.within.is_full:
            k = _Operator(A, data.within.projector)(k)
        inner = _Operator(A, data.green.green)(_mul(y_inv, k, y))
        factor = tuple(sympy.eye(d) + b / 2 for d, b in zip(A.dims, inner))
        corrections.append(factor)
        x = _tidy(_mul(y, factor))

    x = _mul(x, to_symbolic(g_total))
    h = _tidy(tuple(b.H * b for b in x))
    x = tuple(b.applyfunc(lambda e: _expand_logs(e, depth)) for b in x)
    h = tuple(b.applyfunc(lambda e: _expand_logs(e, depth)) for b in h)
    corrections = [tuple(b.applyfunc(lambda e: _expand_logs(e, depth)) for b in c) for c in reversed(corrections)]
    logger.info("asymptotic solution of depth %d", depth)
    return AsymptoticForm(M, projectors, x, h, g_total, tuple(corrections))


@dataclass
class ResidualProfile:
    """Size of the flow residual of a candidate along a geometric grid.

    The decay is fitted as ``|s(t)| ~ C t^a (log t)^b``.
    """

    times: np.ndarray
    norms: np.ndarray
    scale: np.ndarray
    exact: bool
    exponent: Optional[float]
    log_exponent: Optional[float]
    log_constant: Optional[float]
    integrable: bool
    tail: Optional[float] = None


def is_integrable_decay(a: float, b: float) -> bool:
    return a < -1.05 or (abs(a + 1) <= 0.05 and b < -1.25)


def residual_l1(
    Q: Quadruple,
    candidate: AsymptoticForm,
    t_span: Tuple[float, float] = RESIDUAL_SPAN,
    samples: int = 60,
    tail: bool = True,
) -> ResidualProfile:
    """s(t) = x' x^-1 + (x' x^-1)* - [(x phi x^-1)*, x phi x^-1] + rho along t_span."""
    if Q.reduction is not None:
        raise InputError("residuals are measured against an unreduced quadruple")
    A, M = Q.algebra, Q.module
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not (t0 > 0 and t1 > t0):
        raise InputError("t_span must satisfy 0 < t0 < t1, got {}".format((t0, t1)))
    blocks = [k for k, d in enumerate(A.dims) if d]
    x_fns = {k: sympy.lambdify(T, list(candidate.x[k]), "mpmath") for k in blocks}
    dx_fns = {k: sympy.lambdify(T, list(candidate.x[k].diff(T)), "mpmath") for k in blocks}
    grid = np.geomspace(t0, t1, samples)
    norms = np.zeros(samples)
    scale = np.zeros(samples)

    def block(values, d):
        return mpmath.matrix([[values[r * d + c] for c in range(d)] for r in range(d)])

    with mpmath.workdps(RESIDUAL_DPS):
        phi = [mpmath.matrix(x.tolist()) if x.size else None for x in Q.phi]
        rho = {k: mpmath.matrix(Q.rho[k].tolist()) for k in blocks}
        for n, t in enumerate(grid):
            tm = mpmath.mpf(t)
            X = {k: block(x_fns[k](tm), A.dims[k]) for k in blocks}
            X_inv = {k: mpmath.inverse(X[k]) for k in blocks}
            s = {}
            size = mpmath.mpf(0)
            for k in blocks:
                D = block(dx_fns[k](tm), A.dims[k]) * X_inv[k]
                S = D + D.transpose_conj()
                size += A.masses[k] * mpmath.mnorm(S, "f") ** 2
                s[k] = S + rho[k]
            for x, (i, j) in zip(phi, M.arrows):
                if x is None:
                    continue
                psi = X[j] * x * X_inv[i]
                s[i] -= psi.transpose_conj() * psi / A.masses[i]
                s[j] += psi * psi.transpose_conj() / A.masses[j]
            total = sum(A.masses[k] * mpmath.mnorm(s[k], "f") ** 2 for k in blocks)
            norms[n] = float(mpmath.sqrt(total))
            scale[n] = float(mpmath.sqrt(size))

    if np.all(norms <= ZERO_RESIDUAL * np.maximum(scale, 1e-300)):
        logger.info("the candidate solves the flow exactly")
        return ResidualProfile(grid, norms, scale, True, None, None, None, True, 0.0 if tail else None)

    keep = norms > 0
    if keep.sum() < 4:
        raise InputError("too few nonzero residual samples to fit a decay")
    lt = np.log(grid[keep])
    design = np.column_stack([np.ones_like(lt), lt, np.log(lt)])
    coef, *_ = scipy.linalg.lstsq(design, np.log(norms[keep]))
    c, a, b = (float(v) for v in coef)
    integrable = is_integrable_decay(a, b)
    logger.info("residual decays like t^%.4f (log t)^%.4f", a, b)
    estimate = None
    if tail and integrable:
        estimate, _ = scipy.integrate.quad(lambda u: math.exp(c + (a + 1) * u) * u**b, math.log(t1), np.inf)
    elif not integrable:
        logger.warning("residual decay t^%.3f (log t)^%.3f is not integrable", a, b)
    return ResidualProfile(grid, norms, scale, False, a, b, c, integrable, estimate)
