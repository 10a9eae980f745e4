"""Implicit-midpoint time stepping for the Berger plate and beam.

The unknowns are nodal displacements ``x`` and velocities ``y`` at the
nodes not fixed by essential conditions.  With ``ym`` the midpoint velocity,

    2 ym + dt^2/2 (K0 + gamma L) ym + dt k Kd S ym
        = 2 y0 - dt (K0 + gamma L) x0 + dt p - dt Kd r(S ym) + dt abar L xm,

where ``K0``/``Kd`` are the biharmonic's responses to unknowns and to the
boundary feedback, ``S`` the feedback argument, ``k = D'(0)`` and
``r(s) = D(s) - k s``.  The left side is factorized once per stepper.  The
Berger coefficient ``abar`` is updated by Picard iteration.  Within each
iterate the boundary feedback is solved exactly: with ``B = A^-1 Kd`` the
trace ``s = S ym`` satisfies the small system ``s + dt S B r(s) = S A^-1 b``,
which Newton's method handles at the cost of a few boundary-sized solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .closures import linear_operators
from .damping import DampingLaw, septic_boundary_damping, septic_derivative
from .energetics import (FIELDS, EnergyReport, boundary_rates, boundary_traces, compute_energies,
                         feedback_weights)
from .geometry import Mesh
from .operators import PhysicsParams, dirichlet_form, gradient_norm_sq


class PicardError(RuntimeError):
    """Picard iteration did not reach its tolerance."""

    def __init__(self, message: str, residual: float, t: float):
        super().__init__(message)
        self.residual = residual
        self.t = t


@dataclass
class PlateState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def copy(self) -> "PlateState":
        return PlateState(self.u.copy(), self.v.copy(), self.t)


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    picard_iterations: int = 8
    picard_tolerance: float = 1e-10
    scheme: str = "midpoint-implicit"
    linearized: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.picard_iterations < 1:
            raise ValueError("picard_iterations must be at least 1")
        if not self.picard_tolerance > 0:
            raise ValueError("picard_tolerance must be positive")
        if self.scheme != "midpoint-implicit":
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def with_(self, **kw) -> "StepperConfig":
        return replace(self, **kw)


class Stepper:
    """Advances PlateStates on one mesh with fixed parameters, law and dt."""

    def __init__(self, mesh: Mesh, configuration: str, params: PhysicsParams,
                 law: Optional[DampingLaw], cfg: StepperConfig):
        mesh.spec.check_configuration(configuration)
        self.mesh = mesh
        self.configuration = configuration
        self.params = params
        self.cfg = cfg
        if configuration == "HD":
            self.law = law
            self.feedback = law if law is not None else (lambda s: np.zeros_like(s))
            self.k = law.linear_part if law is not None else 0.0
        else:
            self.law = None
            self.feedback = septic_boundary_damping
            self.k = 0.0  # septic law is flat at the origin
        if cfg.linearized:
            self.feedback = lambda s: np.zeros_like(s)
            self.k = 0.0
        # laws that are exactly linear need no boundary Newton solve
        self.law_nonlinear = not cfg.linearized and (
            configuration != "HD" or (law is not None and law.name not in ("linear", "zero")))
        ops = linear_operators(mesh, configuration, params)
        self.ops = ops
        self.closure = ops.closure
        gamma = 0.0 if cfg.linearized else params.gamma
        self.stiff = (ops.K0 + gamma * ops.L).tocsr()
        dt = cfg.dt
        A = 2.0 * sp.identity(ops.closure.n, format="csr") + 0.5 * dt * dt * self.stiff
        if self.k and ops.closure.n_feedback:
            A = A + dt * self.k * (ops.Kd @ ops.S)
        self._lu = spla.splu(sp.csc_matrix(A))
        if ops.closure.n_feedback and not cfg.linearized:
            self._B = self._lu.solve(ops.Kd.toarray())
            self._G = np.asarray(ops.S @ self._B)
        self.load = self.closure.gather(params.load(mesh))
        self.last_iterations = 0
        self.last_residual = 0.0
        self.last_mid = None
        self.weights = feedback_weights(mesh, configuration)

    # -- state helpers ------------------------------------------------------
    def remainder(self, s: np.ndarray) -> np.ndarray:
        return self.feedback(s) - self.k * s

    def _remainder_slope(self, s: np.ndarray) -> np.ndarray:
        if self.configuration == "HD":
            return self.law.derivative(s) - self.k
        return septic_derivative(s)

    def _solve_feedback(self, c: np.ndarray, s: np.ndarray, tol: float = 1e-13, max_iter: int = 100):
        """Damped Newton for s + dt G r(s) = c (r may have kinks, hence the line search)."""
        dt = self.cfg.dt
        eye = np.eye(len(c))

        def residual(s):
            return s + dt * (self._G @ self.remainder(s)) - c

        F = residual(s)
        scale = max(1.0, float(np.max(np.abs(c))))
        for _ in range(max_iter):
            if np.max(np.abs(F)) <= tol * scale:
                return s
            J = eye + dt * self._G * self._remainder_slope(s)[None, :]
            ds = np.linalg.solve(J, F)
            step, norm = 1.0, np.linalg.norm(F)
            while True:
                trial = s - step * ds
                Ft = residual(trial)
                if np.linalg.norm(Ft) <= (1.0 - 1e-4 * step) * norm or step < 1e-6:
                    break
                step *= 0.5
            s, F = trial, Ft
        raise PicardError(f"boundary Newton solve did not converge (residual {np.max(np.abs(F)):.3e})",
                          float(np.max(np.abs(F))), np.nan)

    def close_state(self, x: np.ndarray, y: np.ndarray, t: float) -> PlateState:
        """Closed fields from unknown vectors; the displacement ghosts carry D(trace of v)."""
        d = self.feedback(self.ops.S @ y) if self.closure.n_feedback else None
        return PlateState(self.closure.field(x, d), self.closure.field(y), float(t))

    def state_from_values(self, u: np.ndarray, v: np.ndarray, t: float = 0.0) -> PlateState:
        """Restrict padded arrays to the unknowns and close them."""
        return self.close_state(self.closure.gather(u), self.closure.gather(v), t)

    def berger_form(self, x: np.ndarray) -> float:
        return dirichlet_form(self.mesh, self.closure.field(x))

    # -- stepping -----------------------------------------------------------
    def step(self, state: PlateState) -> PlateState:
        cfg, ops = self.cfg, self.ops
        dt = cfg.dt
        x0 = self.closure.gather(state.u)
        y0 = self.closure.gather(state.v)
        rhs0 = 2.0 * y0 - dt * (self.stiff @ x0) + dt * self.load
        nonlinear = not cfg.linearized
        has_feedback = nonlinear and self.closure.n_feedback > 0
        a0 = self.berger_form(x0) if nonlinear else 0.0
        ym = y0.copy()
        s = ops.S @ y0 if has_feedback else None
        residual = np.inf
        iterations = 0
        for iterations in range(1, cfg.picard_iterations + 1):
            rhs = rhs0.copy()
            if nonlinear:
                xm = x0 + 0.5 * dt * ym
                abar = 0.5 * (a0 + self.berger_form(x0 + dt * ym))
                rhs += dt * abar * (ops.L @ xm)
            new = self._lu.solve(rhs)
            if has_feedback and self.law_nonlinear:
                s = self._solve_feedback(ops.S @ new, s)
                new = new - dt * (self._B @ self.remainder(s))
            if not np.all(np.isfinite(new)):
                raise PicardError("linear solve produced non-finite values", np.inf, state.t)
            residual = float(np.max(np.abs(new - ym))) / max(1.0, float(np.max(np.abs(new))))
            ym = new
            if not nonlinear or residual < cfg.picard_tolerance:
                break
        self.last_iterations = iterations
        self.last_residual = residual
        if nonlinear and residual >= cfg.picard_tolerance:
            raise PicardError(f"Picard iteration stalled at t={state.t:.6g} "
                              f"(residual {residual:.3e} after {iterations} iterations)",
                              residual, state.t)
        self.last_mid = (x0 + 0.5 * dt * ym, ym)
        x1 = x0 + dt * ym
        y1 = 2.0 * ym - y0
        return self.close_state(x1, y1, state.t + dt)


def step_hd(state: PlateState, mesh: Mesh, params: PhysicsParams, law: Optional[DampingLaw],
            cfg: StepperConfig) -> PlateState:
    """One hinged-dissipative step.  Builds a fresh stepper; loops should reuse a :class:`Stepper`."""
    return Stepper(mesh, "HD", params, law, cfg).step(state)


def step_fcd1d(state: PlateState, mesh: Mesh, params: PhysicsParams, cfg: StepperConfig) -> PlateState:
    """One free-clamped step with the septic free-end feedback."""
    if mesh.dim != 1:
        raise ValueError("the free-clamped configuration is one-dimensional")
    return Stepper(mesh, "FCD", params, None, cfg).step(state)


@dataclass
class TrajectoryRecord:
    mesh: Mesh
    configuration: str
    params: PhysicsParams
    law: Optional[DampingLaw]
    cfg: StepperConfig
    stride: int
    M: float = 0.0
    rows: List[EnergyReport] = field(default_factory=list)
    snapshots: List[PlateState] = field(default_factory=list)
    picard: List[int] = field(default_factory=list)
    mid_traces: List[np.ndarray] = field(default_factory=list)  # feedback argument at each step's midpoint
    mid_states: List[PlateState] = field(default_factory=list)  # step midpoints, kept at stride 1
    incomplete: bool = False
    error: Optional[str] = None

    def series(self, name: str) -> np.ndarray:
        if name not in FIELDS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return self.series("t")

    @property
    def snapshot_times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def require_every_step(self):
        if self.stride != 1:
            raise ValueError("this audit needs a record stored at every step (stride 1)")

    def recompute_dissipation(self, law: DampingLaw) -> np.ndarray:
        """Per-step HD boundary work for another law, from the stored midpoint traces."""
        w = feedback_weights(self.mesh, self.configuration)
        out = [0.0]
        for arg in self.mid_traces[1:]:
            out.append(self.cfg.dt * boundary_rates(w, "HD", arg, arg, self.params, law, 0.0)[0])
        return np.array(out)


def _step_work(stepper: Stepper, a_mid: float):
    """(dissipated, non-dissipative) boundary work of the last step and its midpoint argument."""
    if stepper.cfg.linearized:
        return 0.0, 0.0, np.zeros(stepper.weights.size)
    xm, ym = stepper.last_mid
    cl = stepper.closure
    arg, dnu = boundary_traces(stepper.mesh, stepper.configuration, cl.field(xm), cl.field(ym))
    diss, nondiss = boundary_rates(stepper.weights, stepper.configuration, arg, dnu,
                                   stepper.params, stepper.law, a_mid)
    dt = stepper.cfg.dt
    return dt * diss, dt * nondiss, arg


def run_trajectory(stepper: Stepper, initial: PlateState, horizon: float, record_stride: int = 1,
                   M: float = 0.0) -> TrajectoryRecord:
    """Step from ``initial`` for ``round(horizon/dt)`` steps, recording every step's energies.

    Snapshots are kept every ``record_stride`` steps (the first and last
    always); at stride 1 the step midpoints are kept as well, for audits
    that integrate in time with the midpoint rule.  A failing step ends the run early with the record flagged
    incomplete.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if record_stride < 1:
        raise ValueError("record_stride must be at least 1")
    dt = stepper.cfg.dt
    steps = int(round(horizon / dt))
    if steps < 1:
        raise ValueError("horizon shorter than one time step")
    mesh, params = stepper.mesh, stepper.params
    law = stepper.law if not stepper.cfg.linearized else None
    rec = TrajectoryRecord(mesh, stepper.configuration, params, law, stepper.cfg, record_stride, M)
    state = stepper.state_from_values(initial.u, initial.v, initial.t)
    first = compute_energies(mesh, state, params, M)
    rec.rows.append(first)
    rec.snapshots.append(state)
    rec.picard.append(0)
    rec.mid_traces.append(np.zeros(stepper.weights.size))
    accumulated = 0.0
    for n in range(1, steps + 1):
        try:
            state = stepper.step(state)
        except (PicardError, RuntimeError, FloatingPointError) as exc:
            rec.incomplete = True
            rec.error = str(exc)
            break
        row = compute_energies(mesh, state, params, M)
        diss, nondiss, arg = _step_work(stepper, 0.5 * (rec.rows[-1].grad_sq + row.grad_sq))
        accumulated += diss + nondiss
        row.boundary_dissipation = diss
        row.nondissipative_term = nondiss
        if stepper.cfg.linearized:
            row.balance_residual = row.kinetic + row.bending - first.kinetic - first.bending
        else:
            row.balance_residual = row.scriptE - first.scriptE + accumulated
        rec.rows.append(row)
        rec.picard.append(stepper.last_iterations)
        rec.mid_traces.append(arg)
        if record_stride == 1:
            xm, ym = stepper.last_mid
            rec.mid_states.append(stepper.close_state(xm, ym, state.t - 0.5 * dt))
        if n % record_stride == 0 or n == steps:
            rec.snapshots.append(state)
    return rec


# -- initial data ---------------------------------------------------------

def eigenmode(mesh: Mesh, modes=(1, 1)) -> np.ndarray:
    """Hinged eigenfunction prod_k sin(m_k pi x_k / L_k) sampled on the padded mesh."""
    ext = mesh.spec.extents

    def fn(*xs):
        out = np.ones_like(xs[0])
        for x, m, L in zip(xs, modes, ext):
            out = out * np.sin(m * np.pi * x / L)
        return out

    return mesh.sample(fn)


def bump(mesh: Mesh, power: int = 6) -> np.ndarray:
    """Product of (x(L - x))^power normalised to unit peak; flat to high order at hinged edges."""
    ext = mesh.spec.extents

    def fn(*xs):
        out = np.ones_like(xs[0])
        for x, L in zip(xs, ext):
            out = out * (4.0 * x * (L - x) / L**2) ** power
        return out

    return mesh.sample(fn)


def cantilever_beta(n: int = 1) -> float:
    """n-th root of cos(b) cosh(b) = -1."""
    f = lambda b: np.cos(b) * np.cosh(b) + 1.0
    lo = (n - 0.5) * np.pi
    return float(scipy.optimize.brentq(f, lo - 0.5 * np.pi + 1e-9, lo + 0.5 * np.pi))


def cantilever_mode(mesh: Mesh, n: int = 1) -> np.ndarray:
    """Clamped at x = 0, free at x = L: cosh - cos - sigma (sinh - sin), unit tip value."""
    L = mesh.spec.extents[0]
    b = cantilever_beta(n) / L
    bl = b * L
    sigma = (np.cosh(bl) + np.cos(bl)) / (np.sinh(bl) + np.sin(bl))

    def fn(x):
        return np.cosh(b * x) - np.cos(b * x) - sigma * (np.sinh(b * x) - np.sin(b * x))

    return mesh.sample(fn) / fn(np.array(L))


def scale_to_hat_energy(stepper: Stepper, u_shape: np.ndarray, v_shape: np.ndarray,
                        target: float) -> PlateState:
    """State A*(u_shape, v_shape) whose hat-energy equals ``target`` (bisection on A >= 0)."""
    if target < 0:
        raise ValueError("hat-energy is non-negative")
    if target == 0:
        return stepper.state_from_values(0.0 * u_shape, 0.0 * v_shape)

    def hat(A):
        s = stepper.state_from_values(A * u_shape, A * v_shape)
        return compute_energies(stepper.mesh, s, stepper.params).hatE - target

    hi = 1.0
    while hat(hi) < 0:
        hi *= 2.0
    A = scipy.optimize.brentq(hat, 0.0, hi, xtol=1e-14, rtol=1e-14)
    return stepper.state_from_values(A * u_shape, A * v_shape)


def static_solution(stepper: Stepper, xtol: float = 1e-14) -> PlateState:
    """Discrete rest state: (K0 + gamma L) x - a(x) L x = p with the stepper's Berger form a.

    The scalar a is found by bracketing: raising a stiffens the operator, so
    a(x(a)) - a changes sign on [0, a(x(0))].
    """
    ops = stepper.ops
    base = (ops.K0 + stepper.params.gamma * ops.L).tocsc()

    def solve(a):
        return spla.spsolve((base - a * ops.L).tocsc(), stepper.load)

    def gap(a):
        return stepper.berger_form(solve(a)) - a

    hi = stepper.berger_form(solve(0.0))
    a = 0.0 if hi == 0 else scipy.optimize.brentq(gap, 0.0, hi, xtol=xtol * max(1.0, hi), rtol=1e-15)
    x = solve(a)
    return stepper.close_state(x, np.zeros_like(x), 0.0)
