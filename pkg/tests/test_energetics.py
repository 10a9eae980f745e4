import numpy as np
import pytest
from hypothesis import given, strategies as st

from berger_lab.damping import make_law
from berger_lab.dynamics import PlateState, Stepper, StepperConfig, bump, eigenmode, run_trajectory
from berger_lab.energetics import (compute_energies, energetic_equivalence, energy_balance_residual_fcd,
                                   energy_balance_residual_hd, lower_order_audit, poincare_eigenvalue,
                                   potential_bound_holds, potential_bound_m)
from berger_lab.geometry import DomainSpec, build_mesh
from berger_lab.operators import PhysicsParams

from conftest import sine2

PI = np.pi
MESH9 = build_mesh(DomainSpec.hinged_rectangle(), 9)


def _random_smooth(mesh, rng, scale):
    u = np.zeros(mesh.field_shape)
    for i in range(1, 4):
        for j in range(1, 4):
            u += scale * rng.standard_normal() / (i * i + j * j) * eigenmode(mesh, (i, j))
    return u


def test_zero_state_energies(square33):
    z = np.zeros(square33.field_shape)
    r = compute_energies(square33, PlateState(z, z), PhysicsParams())
    assert all(v == 0 for v in r.as_dict().values())


def test_mode_energies(square33):
    u = sine2(square33)
    r = compute_energies(square33, PlateState(u, 0 * u), PhysicsParams())
    assert r.kinetic == 0
    assert r.bending == pytest.approx(PI**4 / 2, rel=1e-2)
    assert r.pi == pytest.approx(PI**4 / 16, rel=1e-2)
    assert r.scriptE == r.hatE


def test_in_plane_load_lowers_pi_by_half_gamma_grad(square33):
    # Pi = (a^2 - 2 gamma a)/4 with a = pi^2/2 and gamma = 2 gives pi^4/16 - pi^2/2
    u = sine2(square33)
    r = compute_energies(square33, PlateState(u, 0 * u), PhysicsParams(gamma=2.0))
    assert r.pi == pytest.approx(PI**4 / 16 - PI**2 / 2, rel=2e-2)
    r0 = compute_energies(square33, PlateState(u, 0 * u), PhysicsParams())
    assert r0.pi - r.pi == pytest.approx(0.5 * 2.0 * r.grad_sq, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 30.0), st.floats(0.0, 5.0), st.floats(0.0, 50.0))
def test_hat_nonnegative_and_script_m_nonnegative(seed, scale, gamma, load):
    rng = np.random.default_rng(seed)
    params = PhysicsParams(gamma=gamma, p=load * eigenmode(MESH9, (1, 1)))
    u = _random_smooth(MESH9, rng, scale)
    v = _random_smooth(MESH9, rng, scale)
    M = potential_bound_m(params, 0.25, MESH9, "HD")
    r = compute_energies(MESH9, PlateState(u, v), params, M)
    assert r.hatE >= 0
    assert r.scriptEM >= 0


def test_potential_offset_examples(square33):
    assert potential_bound_m(PhysicsParams(), 0.3, square33, "HD") == 0
    assert potential_bound_m(PhysicsParams(gamma=2.0), 0.5, square33, "HD") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        potential_bound_m(PhysicsParams(), 0.0, square33, "HD")


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 0.25, 0.5]), st.floats(1e-3, 20.0))
def test_potential_bound_never_violated(seed, eps, scale):
    params = PhysicsParams(gamma=3.0, p=10.0 * eigenmode(MESH9, (1, 1)))
    M = potential_bound_m(params, eps, MESH9, "HD")
    u = _random_smooth(MESH9, np.random.default_rng(seed), scale)
    lhs, rhs = potential_bound_holds(MESH9, u, params, eps, M)
    assert lhs <= rhs


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 20.0))
def test_energetic_equivalence(seed, scale):
    rng = np.random.default_rng(seed)
    params = PhysicsParams(gamma=2.0, p=5.0 * eigenmode(MESH9, (1, 1)))
    s = PlateState(_random_smooth(MESH9, rng, scale), _random_smooth(MESH9, rng, scale))
    ok, lower, upper = energetic_equivalence(compute_energies(MESH9, s, params),
                                             potential_bound_m(params, 0.25, MESH9, "HD"))
    assert ok and lower <= upper


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 20.0), st.sampled_from([0.1, 0.5]))
def test_lower_order_proxy_bound(seed, scale, eps):
    u = _random_smooth(MESH9, np.random.default_rng(seed), scale)
    lhs, rhs = lower_order_audit(MESH9, u, PhysicsParams(), eps, 0.5, 2 * PI**2)
    assert lhs <= rhs


def test_poincare_eigenvalue_fcd_bounds_forms():
    mesh = build_mesh(DomainSpec.free_clamped_interval(), 33, "FCD")
    params = PhysicsParams(mu1=0.5)
    lam = poincare_eigenvalue(mesh, "FCD", params)
    assert lam > 0
    st_ = Stepper(mesh, "FCD", params, None, StepperConfig(dt=1e-3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = st_.state_from_values(rng.standard_normal(mesh.field_shape), np.zeros(mesh.field_shape))
        r = compute_energies(mesh, s, params)
        assert lam * mesh.norm_sq(s.u) <= 2 * r.bending * (1 + 1e-10)


def _hd_record(mesh, law, horizon, linearized=False, amp=1.0):
    stp = Stepper(mesh, "HD", PhysicsParams(gamma=1.0), law, StepperConfig(dt=4e-3, picard_iterations=30,
                                                                            linearized=linearized))
    u = amp * bump(mesh)
    return run_trajectory(stp, stp.state_from_values(u, 0 * u), horizon)


def test_zero_trajectory_balances():
    rec = _hd_record(MESH9, make_law("linear"), 0.02, amp=0.0)
    assert energy_balance_residual_hd(rec) == 0
    fmesh = build_mesh(DomainSpec.free_clamped_interval(), 17, "FCD")
    stp = Stepper(fmesh, "FCD", PhysicsParams(), None, StepperConfig(dt=1e-2))
    z = np.zeros(fmesh.field_shape)
    assert energy_balance_residual_fcd(run_trajectory(stp, stp.state_from_values(z, z), 0.05)) == (0.0, 0.0)


def test_balance_window_checks():
    rec = _hd_record(MESH9, make_law("linear"), 0.02)
    with pytest.raises(ValueError):
        energy_balance_residual_hd(rec, window=(0.0, 1.0))
    with pytest.raises(ValueError):
        energy_balance_residual_fcd(rec)
    full = energy_balance_residual_hd(rec)
    assert full == pytest.approx(rec.rows[-1].balance_residual, abs=1e-12)


def test_linearized_residual_is_linear_energy_drift():
    rec = _hd_record(MESH9, None, 0.04, linearized=True)
    E = rec.series("kinetic") + rec.series("bending")
    assert energy_balance_residual_hd(rec) == pytest.approx(E[-1] - E[0], abs=1e-12)


def test_recomputed_dissipation_for_another_law():
    rec = _hd_record(MESH9, make_law("linear", k=1.0), 0.02)
    doubled = energy_balance_residual_hd(rec, law=make_law("linear", k=2.0))
    plain = energy_balance_residual_hd(rec)
    extra = float(np.sum(rec.series("boundary_dissipation")))
    assert doubled - plain == pytest.approx(extra, rel=1e-10)
