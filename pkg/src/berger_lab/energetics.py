"""Energy functionals, balance audits and the potential-energy offset.

Energies are evaluated on closed states with the trapezoid quadrature of
the mesh.  Boundary work is accumulated per step from the midpoint traces
of the implicit-midpoint stepper.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .damping import DampingLaw, septic_boundary_damping
from .geometry import FREE_DAMPED, Mesh
from .operators import (PhysicsParams, bilinear_a, gradient_norm_sq, laplacian,
                        normal_derivative_trace, smallest_eigenvalue)

FIELDS = ("t", "kinetic", "bending", "grad_sq", "pi", "scriptE", "hatE", "scriptEM",
          "boundary_dissipation", "nondissipative_term", "balance_residual")


@dataclass
class EnergyReport:
    t: float
    kinetic: float
    bending: float
    grad_sq: float
    pi: float
    scriptE: float
    hatE: float
    scriptEM: float
    boundary_dissipation: float = 0.0  # boundary work over the last step
    nondissipative_term: float = 0.0  # FCD only: free-end Berger work over the last step
    balance_residual: float = 0.0  # scriptE(t) + accumulated boundary terms - scriptE(0)

    def as_dict(self) -> dict:
        return asdict(self)


def _free_segments(mesh: Mesh):
    return [s for s in mesh.segments.values() if s.role == FREE_DAMPED]


def feedback_weights(mesh: Mesh, configuration: str) -> np.ndarray:
    """Boundary quadrature weights in the order of the stepper's feedback vector."""
    segs = mesh.segments.values() if configuration == "HD" else _free_segments(mesh)
    parts = [seg.weights for seg in segs]
    return np.concatenate(parts) if parts else np.zeros(0)


def boundary_traces(mesh: Mesh, configuration: str, u: np.ndarray, v: np.ndarray):
    """(feedback argument, d_nu u) at feedback nodes: d_nu v under HD, v at the free end under FCD."""
    segs = list(mesh.segments.values()) if configuration == "HD" else _free_segments(mesh)
    if not segs:
        return np.zeros(0), np.zeros(0)
    dnu_u = np.concatenate([normal_derivative_trace(mesh, u, seg) for seg in segs])
    if configuration == "HD":
        arg = np.concatenate([normal_derivative_trace(mesh, v, seg) for seg in segs])
    else:
        arg = np.concatenate([v[seg.nodes] for seg in segs])
    return arg, dnu_u


def boundary_rates(weights: np.ndarray, configuration: str, arg: np.ndarray, dnu_u: np.ndarray,
                   params: PhysicsParams, law: Optional[DampingLaw], grad_sq: float):
    """(dissipation rate, non-dissipative rate) from boundary traces.

    HD: int_Gamma D(d_nu u_t) d_nu u_t.  FCD: |u_t|^8 and (gamma - |grad u|^2) d_nu u u_t
    at the free end.
    """
    if configuration == "HD":
        if law is None or arg.size == 0:
            return 0.0, 0.0
        return float(np.sum(weights * law(arg) * arg)), 0.0
    diss = float(np.sum(weights * septic_boundary_damping(arg) * arg))
    nondiss = float(np.sum(weights * (params.gamma - grad_sq) * dnu_u * arg))
    return diss, nondiss


def compute_energies(mesh: Mesh, state, params: PhysicsParams, M: float = 0.0) -> EnergyReport:
    """Energies of one state; the per-step boundary fields are left at zero."""
    u, v = state.u, state.v
    a = gradient_norm_sq(mesh, u)
    kinetic = 0.5 * mesh.norm_sq(v)
    bending = 0.5 * bilinear_a(mesh, u, u, params)
    pu = mesh.inner(params.load(mesh), u)
    pi = 0.25 * (a * a - 2.0 * params.gamma * a - 4.0 * pu)
    E = kinetic + bending
    return EnergyReport(
        t=float(state.t), kinetic=kinetic, bending=bending, grad_sq=a, pi=pi,
        scriptE=E + pi, hatE=E + 0.25 * a * a, scriptEM=E + pi + M,
    )


def _window_indices(times: np.ndarray, window, tol: float = 1e-9):
    s, t = window
    if t < s:
        raise ValueError("window end precedes its start")
    scale = max(1.0, abs(times[-1]))
    if s < times[0] - tol * scale or t > times[-1] + tol * scale:
        raise ValueError(f"window {window} lies outside the record [{times[0]}, {times[-1]}]")
    i = int(np.argmin(np.abs(times - s)))
    j = int(np.argmin(np.abs(times - t)))
    return i, j


def audited_energy(record) -> np.ndarray:
    """scriptE, or the linear energy E when the record was produced in linearized mode."""
    if record.cfg.linearized:
        return record.series("kinetic") + record.series("bending")
    return record.series("scriptE")


def energy_balance_residual_hd(record, law: Optional[DampingLaw] = None, window=None) -> float:
    """scriptE(t) + int_s^t int_Gamma D(d_nu u_t) d_nu u_t - scriptE(s) on the record's step series.

    The boundary work of each step is evaluated at the midpoint velocity the
    stepper used, so the time quadrature matches the scheme.
    """
    if record.configuration != "HD":
        raise ValueError("HD balance audit needs an HD record")
    times = record.series("t")
    window = window or (times[0], times[-1])
    i, j = _window_indices(times, window)
    work = record.series("boundary_dissipation")
    if law is not None and law is not record.law:
        work = record.recompute_dissipation(law)
    E = audited_energy(record)
    return float(E[j] - E[i] + np.sum(work[i + 1:j + 1]))


def energy_balance_residual_fcd(record, window=None):
    """(residual, accumulated non-dissipative integral) for a free-clamped record."""
    if record.configuration != "FCD":
        raise ValueError("FCD balance audit needs an FCD record")
    times = record.series("t")
    window = window or (times[0], times[-1])
    i, j = _window_indices(times, window)
    E = audited_energy(record)
    diss = float(np.sum(record.series("boundary_dissipation")[i + 1:j + 1]))
    nondiss = float(np.sum(record.series("nondissipative_term")[i + 1:j + 1]))
    return float(E[j] + diss + nondiss - E[i]), nondiss


def poincare_eigenvalue(mesh: Mesh, configuration: str, params: PhysicsParams) -> float:
    """Largest lam with lam * ||u||^2 <= a(u, u) for closed states at rest.

    Under HD this is the smallest eigenvalue of the discrete biharmonic.  For
    FCD the quadrature forms differ from the finite-difference operator, so
    the generalized eigenproblem of the two quadratic forms is solved densely.
    """
    if configuration == "HD":
        return smallest_eigenvalue("HD", mesh, params)
    from .closures import Closure

    cl = Closure(mesh, configuration, params.mu1)
    eye = np.eye(cl.n)
    fields = cl.field(eye)
    lap = laplacian(mesh, fields, require="none")
    phys = (Ellipsis,) + mesh.physical
    w = mesh.weights[mesh.physical].ravel()
    Lm = lap[phys].reshape(cl.n, -1)
    Um = fields[phys].reshape(cl.n, -1)
    A = (Lm * w) @ Lm.T
    B = (Um * w) @ Um.T
    for seg in _free_segments(mesh):
        tr = fields[(Ellipsis,) + seg.nodes].reshape(cl.n, -1)
        A += params.mu1 * (tr * seg.weights) @ tr.T
    return float(scipy.linalg.eigh(A, B, eigvals_only=True, subset_by_index=[0, 0])[0])


def potential_bound_m(params: PhysicsParams, epsilon: float, mesh: Mesh,
                      configuration: Optional[str] = None) -> float:
    """Offset M with |gamma/2 |grad u|^2 + (p,u)| <= eps(|Lap u|^2 + |grad u|^4 / 2) + M.

    Young's inequality on each term plus the Poincare bound |u| <= C_P |Lap u|.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    M = params.gamma**2 / (8.0 * epsilon)
    p = params.load(mesh)
    p_sq = mesh.norm_sq(p)
    if p_sq > 0:
        lam = poincare_eigenvalue(mesh, configuration or mesh.spec.configuration(), params)
        M += p_sq / (4.0 * epsilon * lam)
    return M


def potential_bound_holds(mesh: Mesh, u: np.ndarray, params: PhysicsParams, epsilon: float,
                          M: float, bending_sq: Optional[float] = None):
    """(lhs, rhs) of the potential-energy bound for one closed displacement field."""
    a = gradient_norm_sq(mesh, u)
    lhs = abs(0.5 * params.gamma * a + mesh.inner(params.load(mesh), u))
    if bending_sq is None:
        bending_sq = bilinear_a(mesh, u, u, params)
    rhs = epsilon * (bending_sq + 0.5 * a * a) + M
    return lhs, rhs


def energetic_equivalence(report: EnergyReport, M_quarter: float):
    """Check 0.5 hatE - C <= scriptE <= 2 hatE + C with C = 2 M(eps = 1/4)."""
    C = 2.0 * M_quarter
    lower = 0.5 * report.hatE - C
    upper = 2.0 * report.hatE + C
    return lower <= report.scriptE <= upper, lower, upper


def lower_order_offset(epsilon: float, eta: float, lam_laplace: float) -> float:
    """M(eps) for the interpolation proxy |u|^(2(1-theta)) |Lap u|^(2 theta), theta = 1 - eta/2.

    Young with exponents 1/theta, 1/(1-theta) gives theta*eps*|Lap u|^2 +
    kappa |u|^2 with kappa = (1-theta) eps^(-theta/(1-theta)); then
    |u|^2 <= |grad u|^2 / lam_laplace and kappa' a <= eps a^2/2 + kappa'^2/(2 eps).
    """
    theta = 1.0 - eta / 2.0
    kappa = (1.0 - theta) * epsilon ** (-theta / (1.0 - theta)) / lam_laplace
    return kappa**2 / (2.0 * epsilon)


def lower_order_audit(mesh: Mesh, u: np.ndarray, params: PhysicsParams, epsilon: float,
                      eta: float, lam_laplace: float):
    """(lhs, rhs) of the lower-order bound with the interpolation proxy."""
    theta = 1.0 - eta / 2.0
    u_sq = mesh.norm_sq(u)
    lap_sq = bilinear_a(mesh, u, u, params)
    a = gradient_norm_sq(mesh, u)
    lhs = u_sq ** (1.0 - theta) * lap_sq**theta
    rhs = epsilon * (lap_sq + 0.5 * a * a) + lower_order_offset(epsilon, eta, lam_laplace)
    return lhs, rhs
