import math
from fractions import Fraction

import numpy as np
import pytest

from weightflow.errors import InputError, NotCentral, NotHarmonic, NotSemistable, ShapeMismatch
from weightflow.staralg import (
    Bimodule,
    GradedProjectors,
    Reduction,
    StarAlgebra,
    adjoint_commutator,
    commutator,
    commutator_matrix,
    gauge_fix,
    graded_components,
    green_operator,
    is_central,
    laplacian,
    moment,
    reduce,
)

half = Fraction(1, 2)


def a2_module():
    A = StarAlgebra(("src", "sink"), (1, 1), (1.0, 1.0))
    return Bimodule(A, ((0, 1),))


def a4_module():
    A = StarAlgebra(("1", "2", "3", "4"), (1, 1, 1, 1), (1.0, 1.0, 1.0, 1.0))
    return Bimodule(A, ((0, 1), (2, 1), (2, 3)))


def wide_module():
    A = StarAlgebra(("a", "b", "c"), (2, 1, 3), (1.0, 2.0, 0.5))
    return Bimodule(A, ((0, 1), (1, 2), (0, 2)))


def scalar(*values):
    return tuple(np.array([[complex(v)]]) for v in values)


###
# StarAlgebra
###
def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        StarAlgebra(("a",), (1, 2), (1.0,))
    A = StarAlgebra(("a", "b"), (2, 1), (1.0, 1.0))
    with pytest.raises(ShapeMismatch):
        A.check((np.eye(2), np.eye(2)))


def test_weights_must_be_positive():
    with pytest.raises(InputError):
        StarAlgebra(("a",), (1,), (0.0,))


def test_vec_is_isometric():
    A = wide_module().algebra
    rng = np.random.default_rng(1)
    a, b = A.random(rng), A.random(rng)
    assert np.vdot(A.vec(a), A.vec(b)) == pytest.approx(A.inner(a, b))
    assert np.allclose(A.vec(A.unvec(A.vec(a))), A.vec(a))


def test_power_and_sqrt():
    A = wide_module().algebra
    h = A.random_positive(np.random.default_rng(2))
    root = A.sqrt(h)
    assert all(np.allclose(x, y) for x, y in zip(A.mul(root, root), h))
    assert A.min_eigenvalue(h) > 0


###
# Bimodule
###
def test_arrow_outside_vertex_set():
    A = StarAlgebra(("a",), (1,), (1.0,))
    with pytest.raises(ShapeMismatch):
        Bimodule(A, ((0, 1),))


def test_a2_commutator():
    M = a2_module()
    phi = scalar(1 / math.sqrt(2))
    b = M.algebra.central([0.0, 1.0])
    assert commutator(M, phi, b)[0][0, 0] == pytest.approx(-1 / math.sqrt(2))


def test_adjoint_commutator_is_adjoint():
    M = wide_module()
    A = M.algebra
    rng = np.random.default_rng(3)
    for _ in range(50):
        phi, m, b = M.random(rng), M.random(rng), A.random(rng)
        assert M.inner(commutator(M, phi, b), m) == pytest.approx(A.inner(b, adjoint_commutator(M, phi, m)))


def test_commutator_matrix_adjoint():
    M = wide_module()
    A = M.algebra
    rng = np.random.default_rng(4)
    for _ in range(50):
        phi, m = M.random(rng), M.random(rng)
        C = commutator_matrix(M, phi)
        assert np.allclose(C.conj().T @ M.vec(m), A.vec(adjoint_commutator(M, phi, m)))


def test_moment_is_traceless():
    M = wide_module()
    rng = np.random.default_rng(5)
    for _ in range(50):
        phi = M.random(rng)
        assert abs(M.algebra.trace(moment(M, phi))) < 1e-10 * max(1.0, M.norm(phi) ** 2)


def test_laplacian_is_positive():
    M = wide_module()
    A = M.algebra
    rng = np.random.default_rng(6)
    for _ in range(50):
        phi, b = M.random(rng), A.random(rng)
        assert A.inner(b, laplacian(M, phi, b)).real >= -1e-10


def test_conjugate_by_identity():
    M = wide_module()
    phi = M.random(np.random.default_rng(7))
    out = M.conjugate(M.algebra.identity(), phi)
    assert all(np.allclose(x, y) for x, y in zip(out, phi))


def test_bimodule_trace_relation():
    M = wide_module()
    A = M.algebra
    rng = np.random.default_rng(9)
    for _ in range(50):
        phi, psi = M.random(rng), M.random(rng)
        target = A.trace(M.star_pair(phi, psi))
        assert target == pytest.approx(A.trace(M.pair_star(psi, phi)))
        assert target == pytest.approx(M.inner(psi, phi))


###
# is_central
###
def test_scalar_blocks_are_central():
    A = wide_module().algebra
    assert is_central(A, A.central([1.0, -2.0, 3.0]))
    assert not is_central(A, (np.diag([1.0, 0.0]), np.eye(1), np.eye(3)))


###
# green_operator
###
def test_green_identities():
    M = a4_module()
    A = M.algebra
    rng = np.random.default_rng(8)
    for _ in range(50):
        green = green_operator(M, M.random(rng))
        assert max(green.residuals().values()) < 1e-9
        ones = A.identity()
        assert all(np.allclose(x, y) for x, y in zip(green.P(ones), ones))


def test_green_is_self_adjoint():
    M = a4_module()
    A = M.algebra
    rng = np.random.default_rng(12)
    for _ in range(50):
        green = green_operator(M, M.random(rng))
        assert np.allclose(green.green, green.green.conj().T, atol=1e-10)
        b = A.random(rng)
        left, right = A.adjoint(green.G(b)), green.G(A.adjoint(b))
        assert all(np.allclose(x, y, atol=1e-10) for x, y in zip(left, right))


def test_kernel_projection_is_linear_over_kernel():
    M = a4_module()
    A = M.algebra
    rng = np.random.default_rng(13)
    for k in range(50):
        phi = list(M.random(rng))
        # a dropped arrow splits the support and widens the kernel
        phi[k % 3] = np.zeros((1, 1), dtype=complex)
        green = green_operator(M, tuple(phi))
        a, b = green.P(A.random(rng)), A.random(rng)
        left, right = green.P(A.mul(a, b)), A.mul(a, green.P(b))
        assert all(np.allclose(x, y, atol=1e-10) for x, y in zip(left, right))


def test_green_of_zero_map():
    M = wide_module()
    A = M.algebra
    green = green_operator(M, M.zero())
    b = A.random(np.random.default_rng(14))
    assert all(np.allclose(x, y) for x, y in zip(green.P(b), b))
    assert all(np.allclose(x, 0.0) for x in green.G(b))


def test_green_needs_central_moment():
    A = StarAlgebra(("a", "b"), (2, 1), (1.0, 1.0))
    M = Bimodule(A, ((0, 1),))
    with pytest.raises(NotCentral):
        green_operator(M, (np.array([[1.0, 0.0]]),))


###
# GradedProjectors
###
def test_thin_projectors():
    A = a4_module().algebra
    P = GradedProjectors.thin(A, [(half,), (-half,), (half,), (-half,)])
    P.validate()
    assert P.depth == 1
    assert np.allclose([x[0, 0] for x in P.r(0)], [0.5, -0.5, 0.5, -0.5])
    assert np.allclose([x[0, 0] for x in P.r(1)], 0.0)


def test_projectors_must_sum_to_identity():
    A = a2_module().algebra
    with pytest.raises(InputError):
        GradedProjectors(A, ((Fraction(0),),), (A.central([1.0, 0.0]),)).validate()


def test_projector_labels_distinct():
    A = a2_module().algebra
    with pytest.raises(InputError):
        GradedProjectors(A, ((half,), (half,)), (A.central([1.0, 0.0]), A.central([0.0, 1.0])))


def test_thin_projectors_need_thin_algebra():
    with pytest.raises(ShapeMismatch):
        GradedProjectors.thin(wide_module().algebra, [(0,), (0,), (0,)])


def test_block_exponents():
    A = a2_module().algebra
    P = GradedProjectors.thin(A, [(half,), (-half,)])
    assert P.block_exponents() == (((half,),), ((-half,),))


def test_graded_components():
    M = a4_module()
    P = GradedProjectors.thin(M.algebra, [(half, -half), (-half, -half), (half, half), (-half, half)])
    phi = scalar(1, 2, 3)
    assert set(graded_components(M, phi, P, 0)) == {Fraction(-1)}
    second = graded_components(M, phi, P, 1)
    assert set(second) == {Fraction(0), Fraction(-1)}
    assert second[Fraction(-1)][1][0, 0] == 2


###
# reduce
###
def test_a4_reduction():
    M = a4_module()
    A = M.algebra
    P = GradedProjectors.thin(A, [(half, -half), (-half, -half), (half, half), (-half, half)])
    phi = scalar(1, 1, 1)
    first = reduce(M, M.zero(), phi, P.r(0))
    assert first.algebra_basis.shape[1] == 4
    assert first.module_basis.shape[1] == 3
    comps = graded_components(M, first.phi, P, 1)
    second = reduce(M, comps[Fraction(0)], comps[Fraction(-1)], P.r(1), first)
    assert second.algebra_basis.shape[1] == 2
    assert second.module_basis.shape[1] == 1
    assert second.contains(A.central([1.0, 1.0, 0.0, 0.0]))
    assert not second.contains(A.central([1.0, 0.0, 0.0, 0.0]))


def test_reduce_needs_harmonic_part():
    M = a2_module()
    A = M.algebra
    phi = scalar(1)
    with pytest.raises(NotHarmonic):
        reduce(M, phi, scalar(1), A.zero())


def test_full_reduction():
    M = a2_module()
    R = Reduction.full(M)
    assert R.is_full
    b = M.algebra.central([1.0, 2.0])
    assert R.contains(b)


###
# gauge_fix
###
def test_a2_gauge_fix():
    M = a2_module()
    A = M.algebra
    P = GradedProjectors.thin(A, [(half,), (-half,)])
    fix = gauge_fix(M, A.central([0.5, -0.5]), scalar(1), P, level=1)
    assert abs(fix.phi[0][0, 0]) == pytest.approx(1 / math.sqrt(2), rel=1e-8)
    assert fix.residuals["moment"] < 1e-8
    assert all(np.allclose(y, M.conjugate(fix.g, scalar(1))[k]) for k, y in enumerate(fix.phi))


def test_gauge_fix_rejects_positive_degree():
    M = a2_module()
    A = M.algebra
    P = GradedProjectors.thin(A, [(-half,), (half,)])
    with pytest.raises(NotSemistable):
        gauge_fix(M, A.zero(), scalar(1), P, level=0)


def test_gauge_fix_is_idempotent():
    M = a2_module()
    A = M.algebra
    P = GradedProjectors.thin(A, [(half,), (-half,)])
    phi = scalar(1 / math.sqrt(2))
    fix = gauge_fix(M, A.central([0.5, -0.5]), phi, P, level=1)
    assert np.allclose(fix.phi[0], phi[0], atol=1e-10)
    assert max(fix.residuals.values()) < 1e-10


def test_gauge_fix_keeps_unitary_block():
    A = StarAlgebra(("a", "b"), (2, 2), (1.0, 1.0))
    M = Bimodule(A, ((0, 1),))
    c, s = math.cos(0.4), math.sin(0.4)
    phi = (np.array([[c, -s], [s, c]], dtype=complex),)
    fix = gauge_fix(M, A.central([1.0, -1.0]), phi, GradedProjectors.trivial(A))
    assert np.allclose(fix.phi[0], phi[0], atol=1e-10)
    assert max(fix.residuals.values()) < 1e-10


def test_gauge_fix_wide_blocks():
    A = StarAlgebra(("a", "b"), (2, 2), (1.0, 1.0))
    M = Bimodule(A, ((0, 1),))
    phi = (np.array([[1.0, 0.3], [0.2, 2.0]], dtype=complex),)
    fix = gauge_fix(M, A.central([1.0, -1.0]), phi, GradedProjectors.trivial(A))
    assert fix.residuals["moment"] < 1e-8
    # [phi*, phi] = (1, -1) makes the fixed map unitary
    assert np.allclose(fix.phi[0].conj().T @ fix.phi[0], np.eye(2), atol=1e-7)
    assert np.allclose(fix.phi[0], M.conjugate(fix.g, phi)[0])


def test_gauge_fix_splits_gap_degree():
    A = StarAlgebra(("a", "b"), (1, 2), (1.0, 1.0))
    M = Bimodule(A, ((0, 1),))
    P = GradedProjectors(
        A,
        ((Fraction(0),), (-half,)),
        ((np.eye(1), np.diag([1.0, 0.0])), (np.zeros((1, 1)), np.diag([0.0, 1.0]))),
    )
    phi = (np.array([[2.0], [0.6]], dtype=complex),)
    assert set(graded_components(M, phi, P, 0)) == {Fraction(0), -half}
    rho = (np.array([[1.0]]), np.diag([-1.0, 0.0]))
    fix = gauge_fix(M, rho, phi, P)
    assert fix.residuals["gap"] < 1e-10
    assert fix.residuals["moment"] < 1e-8
    assert abs(fix.phi[0][1, 0]) < 1e-10
    assert abs(fix.phi[0][0, 0]) == pytest.approx(1.0, rel=1e-8)
