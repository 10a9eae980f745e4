import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from berger_lab.closures import REACH, _probe, _probe_colored, linear_operators
from berger_lab.geometry import DomainSpec, build_mesh
from berger_lab.operators import (PhysicsParams, UnclosedGhostError, berger_coefficient, biharmonic,
                                  bilinear_a, gradient_norm_sq, laplacian, normal_derivative_trace,
                                  smallest_eigenvalue, von_karman_bracket)

from conftest import sine2

PI = np.pi


def interior(mesh, f):
    return f[mesh.interior]


def test_laplacian_zero_and_quadratic(square33):
    m = square33
    assert np.all(interior(m, laplacian(m, m.sample(lambda x, y: 0 * x))) == 0)
    q = m.sample(lambda x, y: x**2 + y**2)
    assert np.allclose(interior(m, laplacian(m, q)), 4.0, atol=1e-9)


def test_laplacian_requires_closed_ghosts(square33):
    with pytest.raises(UnclosedGhostError):
        laplacian(square33, square33.zeros())


def _lap_err(n):
    m = build_mesh(DomainSpec.hinged_rectangle(), n)
    u = sine2(m)
    return np.max(np.abs(interior(m, laplacian(m, u) + 2 * PI**2 * u)))


def _bih_err(n):
    m = build_mesh(DomainSpec.hinged_rectangle(), n)
    u = sine2(m)
    return np.max(np.abs(interior(m, biharmonic(m, u) - 4 * PI**4 * u)))


def _grad_err(n):
    m = build_mesh(DomainSpec.hinged_rectangle(), n)
    return abs(gradient_norm_sq(m, sine2(m)) - PI**2 / 2)


@pytest.mark.parametrize("err,n", [(_lap_err, 17), (_bih_err, 17), (_grad_err, 33)])
def test_second_order_refinement(err, n):
    # the boundary one-sided rows of the gradient reach the asymptotic regime later
    ratio = err(n) / err(2 * n - 1)
    assert 3.5 <= ratio <= 4.5


def test_biharmonic_affine_and_quartic():
    m = build_mesh(DomainSpec.hinged_interval(), 21)
    assert np.allclose(interior(m, biharmonic(m, m.sample(lambda x: 3 * x - 1))), 0.0, atol=1e-8)
    assert np.allclose(interior(m, biharmonic(m, m.sample(lambda x: x**4))), 24.0, rtol=1e-8)


def test_biharmonic_is_laplacian_composed(square33):
    u = square33.sample(lambda x, y: np.exp(x) * np.cos(2 * y))
    lap2 = laplacian(square33, laplacian(square33, u, require="none"), require="none")
    assert np.array_equal(interior(square33, biharmonic(square33, u)), interior(square33, lap2))


def test_gradient_norm_oracles(interval65, square33):
    assert gradient_norm_sq(interval65, 0 * interval65.sample(lambda x: x)) == 0
    assert gradient_norm_sq(interval65, interval65.sample(lambda x: np.sin(PI * x))) == pytest.approx(
        PI**2 / 2, rel=2e-3)
    assert gradient_norm_sq(square33, sine2(square33)) == pytest.approx(PI**2 / 2, rel=5e-3)


def test_berger_coefficient(square33):
    zero = 0 * sine2(square33)
    assert berger_coefficient(square33, zero, PhysicsParams()) == 0
    assert berger_coefficient(square33, zero, PhysicsParams(gamma=3)) == 3
    assert berger_coefficient(square33, sine2(square33), PhysicsParams(gamma=2)) == pytest.approx(
        2 - PI**2 / 2, abs=0.03)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_berger_coefficient_even(a, b):
    m = build_mesh(DomainSpec.hinged_rectangle(), 9)
    u = m.sample(lambda x, y: a * np.sin(PI * x) * y + b * x**2)
    p = PhysicsParams(gamma=1.5)
    assert berger_coefficient(m, u, p) == berger_coefficient(m, -u, p)


def test_von_karman_bracket(square33):
    m = square33
    q = m.sample(lambda x, y: x**2 + y**2)
    c = m.sample(lambda x, y: 0 * x + 7.0)
    assert np.allclose(interior(m, von_karman_bracket(m, q, c)), 0.0)
    assert np.allclose(interior(m, von_karman_bracket(m, q, q)), 8.0, atol=1e-8)


@given(st.integers(0, 2**32 - 1))
def test_bracket_and_form_symmetry(seed):
    m = build_mesh(DomainSpec.hinged_rectangle(), 9)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2,) + m.field_shape)
    assert np.array_equal(interior(m, von_karman_bracket(m, u, v)), interior(m, von_karman_bracket(m, v, u)))
    p = PhysicsParams(mu=0.3)
    a_uv, a_vu = bilinear_a(m, u, v, p), bilinear_a(m, v, u, p)
    assert abs(a_uv - a_vu) <= 1e-12 * max(1.0, abs(a_uv))


def test_bilinear_a_oracles(square33):
    z = 0 * sine2(square33)
    assert bilinear_a(square33, z, z, PhysicsParams()) == 0
    u = sine2(square33)
    assert bilinear_a(square33, u, u, PhysicsParams(mu=1.0)) == pytest.approx(PI**4, rel=5e-3)


@given(st.integers(0, 2**32 - 1))
def test_bilinear_a_nonnegative_for_mu_one(seed):
    m = build_mesh(DomainSpec.hinged_rectangle(), 9)
    u = np.random.default_rng(seed).standard_normal(m.field_shape)
    assert bilinear_a(m, u, u, PhysicsParams(mu=1.0)) >= 0


def test_normal_derivative_traces(square33, interval65):
    m = square33
    assert np.allclose(normal_derivative_trace(m, m.sample(lambda x, y: x), "right"), 1.0)
    assert np.allclose(normal_derivative_trace(m, 0 * m.sample(lambda x, y: x), "left"), 0.0)
    d = normal_derivative_trace(interval65, interval65.sample(lambda x: np.sin(PI * x)), "left")
    assert d[0] == pytest.approx(-PI, rel=2e-3)


@pytest.mark.parametrize("spec,n,exact", [
    (DomainSpec.hinged_interval(), 65, PI**4),
    (DomainSpec.hinged_rectangle(), 33, 4 * PI**4),
])
def test_smallest_eigenvalue(spec, n, exact):
    lam = smallest_eigenvalue("HD", build_mesh(spec, n))
    assert lam == pytest.approx(exact, rel=2e-3)


@pytest.mark.parametrize("n", [9, 17])
def test_smallest_eigenvalue_positive(n):
    for spec, conf in [(DomainSpec.hinged_interval(), "HD"), (DomainSpec.hinged_rectangle(), "HD"),
                       (DomainSpec.free_clamped_interval(), "FCD")]:
        assert smallest_eigenvalue(conf, build_mesh(spec, n, conf)) > 0


@pytest.mark.parametrize("spec,conf", [(DomainSpec.hinged_rectangle(1.0, 1.5), "HD"),
                                       (DomainSpec.free_clamped_interval(), "FCD")])
def test_colored_probing_matches_dense(spec, conf):
    mesh = build_mesh(spec, (9, 11) if spec.dim == 2 else 13, conf)
    ops = linear_operators(mesh, conf, PhysicsParams(mu1=0.5))
    cl = ops.closure
    size = int(np.prod(mesh.field_shape))
    dense = _probe(lambda X: cl.gather(biharmonic(mesh, cl.field(X))), cl.n, size)
    assert abs(dense - ops.K0).max() == 0
    dense_l = _probe(lambda X: cl.gather(laplacian(mesh, cl.field(X), require="none")), cl.n, size)
    assert abs(dense_l - ops.L).max() == 0


@given(st.integers(0, 2**32 - 1))
def test_colored_probe_recovers_banded_matrix(seed):
    rng = np.random.default_rng(seed)
    n = 40
    band = sp.diags([rng.standard_normal(n - abs(k)) for k in range(-REACH, REACH + 1)],
                    list(range(-REACH, REACH + 1))).tocsr()
    pos = np.arange(n).reshape(-1, 1)
    got = _probe_colored(lambda X: (band @ X.T).T, pos, pos)
    assert abs(got - band).max() == 0
