"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one PASS/FAIL line; the session summary repeats them.
Runs shared between criteria are cached so that criterion 8 can audit the
snapshots of every acceptance run.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from berger_lab.damping import SHIPPED, make_law, verify_damping_assumption
from berger_lab.dynamics import (Stepper, StepperConfig, bump, cantilever_mode, eigenmode, run_trajectory,
                                 scale_to_hat_energy, static_solution)
from berger_lab.energetics import (compute_energies, energetic_equivalence, energy_balance_residual_fcd,
                                   energy_balance_residual_hd, potential_bound_holds, potential_bound_m)
from berger_lab.geometry import DomainSpec, build_mesh, check_star_shaped, flux_field
from berger_lab.longtime import absorbing_ball_experiment, difference_decomposition_audit, multiplier_audit
from berger_lab.operators import PhysicsParams, smallest_eigenvalue

RESULTS = {}
PI = np.pi
SQUARE = DomainSpec.hinged_rectangle()
BEAM = DomainSpec.free_clamped_interval()


def report(cid: int, title: str, passed: bool, detail: str):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {title} | {detail}"
    RESULTS[cid] = line
    print(line)
    assert passed, line


def orders(values):
    v = np.asarray(values, dtype=float)
    return np.log2(v[:-1] / v[1:])


def fmt(xs):
    return "[" + ", ".join(f"{x:.3g}" for x in xs) + "]"


# -- cached runs ------------------------------------------------------------------

@lru_cache(maxsize=None)
def eigen_run():
    t0 = time.perf_counter()
    mesh = build_mesh(SQUARE, 65)
    stp = Stepper(mesh, "HD", PhysicsParams(), make_law("zero"), StepperConfig(dt=1e-3, linearized=True))
    u = eigenmode(mesh, (1, 1))
    rec = run_trajectory(stp, stp.state_from_values(u, 0 * u), 1.0, record_stride=100)
    return rec, time.perf_counter() - t0


BALANCE_LEVELS = ((17, 4e-3), (33, 2e-3), (65, 1e-3))


@lru_cache(maxsize=None)
def balance_run(law: str, n: int, dt: float):
    mesh = build_mesh(SQUARE, n)
    params = PhysicsParams(gamma=3.0, p=5.0 * eigenmode(mesh, (1, 1)))
    stp = Stepper(mesh, "HD", params, make_law(law), StepperConfig(dt=dt, picard_iterations=40))
    u = eigenmode(mesh, (1, 1)) + 0.3 * eigenmode(mesh, (2, 1))
    return run_trajectory(stp, stp.state_from_values(u, 0 * u), 0.2, record_stride=10)


FCD_LEVELS = ((33, 2e-3), (65, 1e-3), (129, 5e-4))


@lru_cache(maxsize=None)
def fcd_run(n: int, dt: float, start: str = "displacement"):
    mesh = build_mesh(BEAM, n, "FCD")
    params = PhysicsParams(gamma=2.0, p=3.0 * mesh.sample(lambda x: x**2))
    stp = Stepper(mesh, "FCD", params, None, StepperConfig(dt=dt, picard_iterations=40))
    mode = cantilever_mode(mesh)
    u, v = (mode, 0 * mode) if start == "displacement" else (0 * mode, mode)
    return run_trajectory(stp, stp.state_from_values(u, v), 0.5, record_stride=25)


@lru_cache(maxsize=None)
def absorbing_run():
    mesh = build_mesh(SQUARE, 17)
    params = PhysicsParams(gamma=0.0, p=20.0 * eigenmode(mesh, (1, 1)))
    law = make_law("linear", k=1.0)
    cfg = StepperConfig(dt=2e-3, picard_iterations=40)
    stp = Stepper(mesh, "HD", params, law, cfg)
    shape = bump(mesh)
    family = [scale_to_hat_energy(stp, shape, 0 * shape, e) for e in (1.0, 10.0, 100.0)]
    return absorbing_ball_experiment(family, mesh, params, law, cfg, horizon=3.0, window_T=0.25)


STATIC_LEVELS = (33, 65, 129)


@lru_cache(maxsize=None)
def static_run(n: int):
    mesh = build_mesh(SQUARE, n)
    params = PhysicsParams(gamma=2.0, p=20.0 * eigenmode(mesh, (1, 1)))
    stp = Stepper(mesh, "HD", params, make_law("linear"), StepperConfig(dt=1e-3))
    return run_trajectory(stp, static_solution(stp), 4e-3)


@lru_cache(maxsize=None)
def flux_run(n: int, dt: float):
    mesh = build_mesh(SQUARE, n)
    params = PhysicsParams(gamma=2.0, p=5.0 * eigenmode(mesh, (1, 1)))
    stp = Stepper(mesh, "HD", params, make_law("saturating"), StepperConfig(dt=dt, picard_iterations=40))
    u = eigenmode(mesh, (1, 1)) + 0.3 * eigenmode(mesh, (2, 1))
    return run_trajectory(stp, stp.state_from_values(u, 0 * u), 0.1)


@lru_cache(maxsize=None)
def pair_run(n: int, dt: float):
    mesh = build_mesh(SQUARE, n)
    params = PhysicsParams(gamma=2.0)
    cfg = StepperConfig(dt=dt, picard_iterations=40)
    stp = Stepper(mesh, "HD", params, make_law("saturating"), cfg)
    u, w = eigenmode(mesh, (1, 1)), 0.8 * eigenmode(mesh, (2, 1))
    ru = run_trajectory(stp, stp.state_from_values(u, 0 * u), 0.1)
    rw = run_trajectory(stp, stp.state_from_values(w, 0 * w), 0.1)
    return ru, rw


# -- criteria -----------------------------------------------------------------------

def test_criterion_1_linear_eigenmode_oracle():
    rec, seconds = eigen_run()
    mesh = rec.mesh
    last = rec.snapshots[-1]
    exact = np.cos(2 * PI**2 * last.t) * eigenmode(mesh, (1, 1))
    err = float(np.sqrt(mesh.norm_sq(last.u - exact) / mesh.norm_sq(exact)))
    lam_shift = smallest_eigenvalue("HD", mesh) / (4 * PI**4) - 1
    report(1, "linear eigenmode oracle (65x65, dt 1e-3, t = 1)", err < 1e-3 and seconds < 60,
           f"rel L2 error {err:.3e} (tol 1e-3), runtime {seconds:.1f} s (tol 60 s), "
           f"discrete eigenvalue shift {lam_shift:.2e}")


def test_criterion_2_hd_energy_equality_order():
    worst, lines = np.inf, []
    for law in SHIPPED:
        res = []
        for n, dt in BALANCE_LEVELS:
            rec = balance_run(law, n, dt)
            assert not rec.incomplete, rec.error
            res.append(abs(energy_balance_residual_hd(rec)) / float(rec.times[-1]))
        q = orders(res)
        worst = min(worst, q.min())
        lines.append(f"{law}: residual/T {fmt(res)} orders {fmt(q)}")
    report(2, "HD energy equality residual order", worst >= 1.8,
           f"min order {worst:.2f} (tol >= 1.8); " + "; ".join(lines))


def test_criterion_3_fcd_energy_identity():
    res = []
    for n, dt in FCD_LEVELS:
        rec = fcd_run(n, dt)
        assert not rec.incomplete, rec.error
        r, _ = energy_balance_residual_fcd(rec)
        res.append(abs(r) / float(rec.times[-1]))
    q = orders(res)
    n, dt = FCD_LEVELS[1]
    signs = [energy_balance_residual_fcd(fcd_run(n, dt, start))[1] for start in ("displacement", "velocity")]
    both = min(signs) < 0 < max(signs)
    report(3, "FCD energy identity order and sign-indefinite free-end term", q.min() >= 1.8 and both,
           f"residual/T {fmt(res)} orders {fmt(q)} (tol >= 1.8); "
           f"non-dissipative integrals {fmt(signs)} (need both signs)")


def test_criterion_4_absorbing_ball():
    rep = absorbing_run()
    entries = [m.entry_time for m in rep.members]
    finite = all(e is not None for e in entries)
    increasing = finite and all(a < b for a, b in zip(entries, entries[1:]))
    fits = all(m.contraction_detected and m.fit_residual < 0.05 for m in rep.members)
    ok = finite and increasing and fits and rep.ball_radius is not None
    report(4, "dissipativity: common absorbing ball", ok,
           f"entry times {entries} (finite, increasing), radius {rep.ball_radius}, "
           f"eta {[m.eta for m in rep.members]}, fit residuals {fmt([m.fit_residual for m in rep.members])} (tol 0.05)")


def test_criterion_5_multiplier_audits():
    consts = []
    for n in STATIC_LEVELS:
        rec = static_run(n)
        rep = multiplier_audit(rec, "equipartition")
        consts.append(rep.residual / float(rec.times[-1]) / rec.mesh.spacing[0] ** 2)
    ratios = np.array(consts[1:]) / np.array(consts[:-1])
    stable = bool(np.all((ratios >= 0.8) & (ratios <= 1.25)))

    flux_res, dropped, star = [], [], []
    for n, dt in BALANCE_LEVELS:
        rec = flux_run(n, dt)
        anchor = flux_field(rec.mesh, (0.5, 0.5))
        flux_res.append(multiplier_audit(rec, "flux", flux=anchor).residual)
        t = rec.times
        edges = np.linspace(t[0], t[-1], 5)
        for a, b in zip(edges[:-1], edges[1:]):
            w = multiplier_audit(rec, "flux", flux=anchor, window=(a, b))
            star.append(w.star_shaped)
            dropped.append(w.dropped_term)
    q = orders(flux_res)
    signs_ok = all(d <= 0 for d, s in zip(dropped, star) if s) and all(star)
    ok = stable and q.min() >= 1.5 and signs_ok
    report(5, "multiplier audits (equipartition, flux, dropped term)", ok,
           f"static C = residual/(T h^2) {fmt(consts)} ratios {fmt(ratios)} (tol [0.8, 1.25]); "
           f"flux residuals {fmt(flux_res)} orders {fmt(q)} (tol >= 1.5); "
           f"dropped term <= 0 on {sum(d <= 0 for d in dropped)}/{len(dropped)} windows")


def test_criterion_6_damping_suite():
    lines, ok = [], True
    for name in SHIPPED:
        rep = verify_damping_assumption(make_law(name), 20.0, 10_000)
        ok &= rep.passed
        lines.append(f"{name}: {'pass' if rep.passed else rep.failed_checks}")
    intended = {"cubic": "upper", "arctan": "lower"}
    for name, side in intended.items():
        rep = verify_damping_assumption(make_law(name), 20.0, 10_000)
        sides = {v.get("side") for v in rep.violations}
        hit = rep.failed_checks == ["slope_bounds"] and sides == {side}
        ok &= hit
        lines.append(f"{name}: fails {rep.failed_checks} ({'/'.join(sorted(map(str, sides)))} slope)")
    report(6, "damping assumption suite", ok, "; ".join(lines))


def test_criterion_7_decomposition():
    res = []
    for n, dt in BALANCE_LEVELS:
        ru, rw = pair_run(n, dt)
        assert not (ru.incomplete or rw.incomplete)
        res.append(difference_decomposition_audit(ru, rw).residual)
    q = orders(res)
    ru, _ = pair_run(*BALANCE_LEVELS[0])
    self_rep = difference_decomposition_audit(ru, ru)
    zero = self_rep.residual == 0 and self_rep.lhs == 0
    report(7, "Berger decomposition identity", q.min() >= 1.8 and zero,
           f"residuals {fmt(res)} orders {fmt(q)} (tol >= 1.8); self-pair residual {self_rep.residual:.1e}")


def _random_smooth(mesh, rng, configuration):
    """Random low-mode field with a log-uniform amplitude in [1e-3, 1e2]."""
    scale = 10.0 ** rng.uniform(-3, 2)
    if configuration == "FCD":
        modes = [cantilever_mode(mesh, n) / n**2 for n in (1, 2, 3)]
    else:
        modes = [eigenmode(mesh, (i, j)) / (i * i + j * j) for i in (1, 2, 3) for j in (1, 2, 3)]
    return scale * np.tensordot(rng.standard_normal(len(modes)), np.array(modes), axes=1)


def _acceptance_records():
    recs = [eigen_run()[0]]
    recs += [balance_run(law, n, dt) for law in SHIPPED for n, dt in BALANCE_LEVELS]
    recs += [fcd_run(n, dt) for n, dt in FCD_LEVELS] + [fcd_run(*FCD_LEVELS[1], "velocity")]
    recs += absorbing_run().records
    recs += [static_run(n) for n in STATIC_LEVELS]
    recs += [flux_run(n, dt) for n, dt in BALANCE_LEVELS]
    recs += [r for n, dt in BALANCE_LEVELS for r in pair_run(n, dt)]
    return recs


def test_criterion_8_potential_bound_and_equivalence():
    rng = np.random.default_rng(20261016)
    setups = [("HD", build_mesh(SQUARE, 17), lambda m: 10.0 * eigenmode(m, (1, 1))),
              ("FCD", build_mesh(BEAM, 33, "FCD"), lambda m: 3.0 * m.sample(lambda x: x**2))]
    violations, checked = 0, 0
    for conf, mesh, load in setups:
        params = PhysicsParams(gamma=3.0, p=load(mesh), mu1=0.5 if conf == "FCD" else 0.0)
        stp = Stepper(mesh, conf, params, make_law("linear") if conf == "HD" else None, StepperConfig(dt=1e-3))
        states = [stp.state_from_values(_random_smooth(mesh, rng, conf), np.zeros(mesh.field_shape)).u
                  for _ in range(10_000)]
        for eps in (0.1, 0.25, 0.5):
            M = potential_bound_m(params, eps, mesh, conf)
            for u in states:
                lhs, rhs = potential_bound_holds(mesh, u, params, eps, M)
                violations += int(lhs > rhs)
                checked += 1
    snaps = bad = 0
    for rec in _acceptance_records():
        Mq = potential_bound_m(rec.params, 0.25, rec.mesh, rec.configuration)
        for s in rec.snapshots:
            ok, _, _ = energetic_equivalence(compute_energies(rec.mesh, s, rec.params), Mq)
            bad += int(not ok)
            snaps += 1
    report(8, "potential bound and energetic equivalence", violations == 0 and bad == 0 and snaps > 0,
           f"{violations} violations in {checked} random-state checks (eps 0.1/0.25/0.5, HD2D and FCD1D); "
           f"equivalence fails on {bad} of {snaps} acceptance-run snapshots")


EXTERIOR = [(2.0, 0.5), (-1.0, 0.5), (0.5, 2.0), (0.5, -1.0), (1.5, 1.5),
            (-0.5, -0.5), (1.01, 0.5), (0.5, 1.01), (3.0, -3.0), (-0.2, 1.3)]


def test_criterion_9_star_shaped_geometry():
    rng = np.random.default_rng(9)
    interior = rng.uniform(0.0, 1.0, size=(100, 2))
    inside = [check_star_shaped(SQUARE, x0).satisfied for x0 in interior]
    outside = [check_star_shaped(SQUARE, x0).satisfied for x0 in EXTERIOR]
    report(9, "star-shaped check on the unit square", all(inside) and not any(outside),
           f"satisfied for {sum(inside)}/100 interior anchors, unsatisfied for "
           f"{sum(not s for s in outside)}/10 exterior anchors")
