"""Long-time diagnostics: multiplier identities, absorbing balls, differences of solutions.

Every audit is post-processing over trajectory records stored at every
step.  Time integrals use the midpoint rule on the stored step midpoints; space
integrals reuse the quadrature of :mod:`berger_lab.energetics`.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .damping import DampingLaw, verify_damping_assumption
from .dynamics import PlateState, Stepper, StepperConfig, TrajectoryRecord, run_trajectory
from .energetics import _window_indices, feedback_weights, potential_bound_m
from .geometry import FluxField, Mesh, check_star_shaped
from .operators import (PhysicsParams, bilinear_a, gradient, gradient_norm_sq, laplacian,
                        normal_derivative_trace, normal_normal_trace, smallest_eigenvalue,
                        tangential_derivative)

THREADS_ENV = "BERGER_LAB_THREADS"


def _trapz(y, t) -> float:
    y, t = np.asarray(y, dtype=float), np.asarray(t, dtype=float)
    if len(t) < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))


def _window_states(record: TrajectoryRecord, window):
    """(times, step states, midpoint states) covering the window."""
    record.require_every_step()
    times = record.snapshot_times
    if len(times) != len(record.rows):
        raise ValueError("record is incomplete or was stored with gaps")
    window = window or (times[0], times[-1])
    i, j = _window_indices(times, window)
    return times[i:j + 1], record.snapshots[i:j + 1], record.mid_states[i:j]


def _midpoint_integral(values, times) -> float:
    """Midpoint rule: values sampled at the step midpoints between consecutive times."""
    return float(np.sum(np.asarray(values, dtype=float) * np.diff(times)))


# -- multiplier identities ---------------------------------------------------

@dataclass
class MultiplierAuditReport:
    identity: str
    window: tuple
    lhs: Dict[str, float]
    rhs: Dict[str, float]
    residual: float
    boundary_trace_norms: Dict[str, float]
    dropped_term: Optional[float] = None  # -int |grad u|^2 int_Gamma (h.nu)|d_nu u|^2
    star_shaped: Optional[bool] = None
    flux_bookkeeping: Optional[float] = None  # max |h.grad u - (h.nu) d_nu u| on the boundary

    @property
    def lhs_total(self) -> float:
        return float(sum(self.lhs.values()))

    @property
    def rhs_total(self) -> float:
        return float(sum(self.rhs.values()))


def _line_normal_derivative(u: np.ndarray, seg) -> np.ndarray:
    return (3.0 * u[seg.line] - 4.0 * u[seg.line_inward[0]] + u[seg.line_inward[1]]) / (2.0 * seg.spacing)


def _instant_terms(mesh: Mesh, state: PlateState, params: PhysicsParams, law: Optional[DampingLaw],
                   flux: Optional[FluxField]):
    u, v = state.u, state.v
    n = mesh.dim
    lap = laplacian(mesh, u)
    a = gradient_norm_sq(mesh, u)
    p = params.load(mesh)
    out = {
        "lap_sq": mesh.norm_sq(lap), "a": a, "v_sq": mesh.norm_sq(v),
        "pu": mesh.inner(p, u), "vu": mesh.inner(v, u),
        "damp_dnu": 0.0, "dnn_max": 0.0, "dtn_max": 0.0,
    }
    for seg in mesh.segments.values():
        dnu = normal_derivative_trace(mesh, u, seg)
        s = normal_derivative_trace(mesh, v, seg)
        dval = law(s) if law is not None else np.zeros_like(s)
        out["damp_dnu"] += float(np.sum(seg.weights * dval * dnu))
        dnn = normal_normal_trace(mesh, u, seg)
        out["dnn_max"] = max(out["dnn_max"], float(np.max(np.abs(dnn))))
        if n == 2:
            dtn = tangential_derivative(mesh, _line_normal_derivative(u, seg), seg)
            out["dtn_max"] = max(out["dtn_max"], float(np.max(np.abs(dtn))))
    if flux is None:
        return out
    grads = gradient(mesh, u)
    hgu = sum(np.where(np.isfinite(g), g, 0.0) * h for g, h in zip(grads, flux.values))
    out["v_hgu"] = mesh.inner(v, hgu)
    out["p_hgu"] = mesh.inner(p, hgu)
    b_moment = b_shear = b_twist = b_flux = 0.0
    bookkeeping = 0.0
    for seg in mesh.segments.values():
        w = seg.weights
        hn = flux.dot_normal(seg)
        dnu = normal_derivative_trace(mesh, u, seg)
        lap_b = lap[seg.nodes]
        dnu_lap = normal_derivative_trace(mesh, lap, seg)
        dnn = normal_normal_trace(mesh, u, seg)
        if n == 2:
            ht = flux.dot_tangent(seg)
            dtn = tangential_derivative(mesh, _line_normal_derivative(u, seg), seg)
        else:
            ht = dtn = np.zeros_like(hn)
        bookkeeping = max(bookkeeping, float(np.max(np.abs(hgu[seg.nodes] - hn * dnu))))
        # on the edge h.grad u = (h.nu) d_nu u, and d_nu(h.grad u) = d_nu u + (h.nu) u_nn + (h.tau) u_tn
        b_moment += 0.5 * float(np.sum(w * hn * lap_b**2))
        b_shear += float(np.sum(w * dnu_lap * hn * dnu))
        b_twist -= float(np.sum(w * lap_b * (dnu + hn * dnn + ht * dtn)))
        b_flux += float(np.sum(w * hn * dnu**2))
    out.update(b_moment=b_moment, b_shear=b_shear, b_twist=b_twist, b_flux=b_flux,
               bookkeeping=bookkeeping)
    return out


def multiplier_audit(record: TrajectoryRecord, identity: str, flux: Optional[FluxField] = None,
                     window=None) -> MultiplierAuditReport:
    """Evaluate every term of the equipartition or flux identity over a window.

    Equipartition (multiplier u):
        int{|Lap u|^2 + |grad u|^4 - |u_t|^2} + int int_Gamma D(d_nu u_t) d_nu u
            = -(u_t, u)|_s^t + int{(p, u) + gamma |grad u|^2}
    Flux (multiplier h.grad u, dimension n):
        int{(2 - n/2)|Lap u|^2 + (n/2)|u_t|^2}
          + int int_Gamma {(h.nu)|Lap u|^2 / 2 + d_nu(Lap u)(h.grad u) - Lap u d_nu(h.grad u)}
          + int (gamma - |grad u|^2)[int_Gamma (h.nu)|d_nu u|^2 / 2 - (1 - n/2)|grad u|^2]
            = -(u_t, h.grad u)|_s^t + int (p, h.grad u)
    """
    if record.configuration != "HD":
        raise ValueError("multiplier audits are defined for hinged-dissipative records")
    if identity not in ("equipartition", "flux"):
        raise ValueError(f"unknown identity {identity!r}")
    mesh, params = record.mesh, record.params
    if identity == "flux" and flux is None:
        raise ValueError("the flux identity needs a flux field")
    times, states, mids = _window_states(record, window)
    star = None
    if flux is not None:
        star = check_star_shaped(mesh.spec, flux.anchor).satisfied
        if not star:
            warnings.warn("flux anchor violates the star-shaped condition; auditing anyway")
    law = record.law
    use_flux = flux if identity == "flux" else None
    rows = [_instant_terms(mesh, s, params, law, use_flux) for s in mids]
    ends = [_instant_terms(mesh, s, params, law, use_flux) for s in (states[0], states[-1])]

    def series(key):
        return np.array([r[key] for r in rows])

    def endpoint(key):
        return ends[1][key] - ends[0][key]

    def integral(values):
        return _midpoint_integral(values, times)

    a = series("a")
    gamma = params.gamma
    traces = {"d_nu_nu_max": float(max(series("dnn_max").max(initial=0.0), ends[0]["dnn_max"], ends[1]["dnn_max"])),
              "d_tau_nu_max": float(max(series("dtn_max").max(initial=0.0), ends[0]["dtn_max"], ends[1]["dtn_max"]))}
    win = (float(times[0]), float(times[-1]))
    if identity == "equipartition":
        lhs = {
            "lap_sq": integral(series("lap_sq")),
            "grad_quartic": integral(a**2),
            "kinetic": -integral(series("v_sq")),
            "damping": integral(series("damp_dnu")),
        }
        rhs = {
            "endpoint": -endpoint("vu"),
            "load": integral(series("pu")),
            "gamma": gamma * integral(a),
        }
        report = MultiplierAuditReport(identity, win, lhs, rhs, 0.0, traces)
    else:
        n = mesh.dim
        b_flux = series("b_flux")
        lhs = {
            "lap_sq": (2.0 - 0.5 * n) * integral(series("lap_sq")),
            "kinetic": 0.5 * n * integral(series("v_sq")),
            "moment": integral(series("b_moment")),
            "shear": integral(series("b_shear")),
            "twist": integral(series("b_twist")),
            "berger": integral((gamma - a) * (0.5 * b_flux - (1.0 - 0.5 * n) * a)),
        }
        rhs = {"endpoint": -endpoint("v_hgu"), "load": integral(series("p_hgu"))}
        dropped = -integral(a * b_flux)
        report = MultiplierAuditReport(identity, win, lhs, rhs, 0.0, traces, dropped, star,
                                       float(series("bookkeeping").max()))
    report.residual = abs(report.lhs_total - report.rhs_total)
    return report


def observability_constant(record: TrajectoryRecord, alpha: Optional[float] = None) -> dict:
    """Smallest C validating (T - 2 alpha) hatE(T) <= C [hatE(0) + |D|^2 int hatE^2 + |D|^2 + |d_nu u_t|^2 + 1].

    Boundary norms are L2(0,T; L2(Gamma)) norms built from the stepper's
    midpoint traces; the analytic constants are not explicit, so only the
    smallest admissible common C is reported.
    """
    if record.configuration != "HD":
        raise ValueError("the observability audit is defined for HD records")
    t = record.series("t")
    hat = record.series("hatE")
    T = float(t[-1] - t[0])
    alpha = T / 10.0 if alpha is None else alpha
    if not 0 < alpha < T / 2:
        raise ValueError("alpha must lie in (0, T/2)")
    w = feedback_weights(record.mesh, "HD")
    dt = record.cfg.dt
    law = record.law
    d_sq = n_sq = 0.0
    for arg in record.mid_traces[1:]:
        n_sq += dt * float(np.sum(w * arg**2))
        if law is not None:
            d_sq += dt * float(np.sum(w * law(arg) ** 2))
    hat_sq = _trapz(hat**2, t)
    lhs = (T - 2.0 * alpha) * hat[-1]
    bracket = hat[0] + d_sq * hat_sq + d_sq + n_sq + 1.0
    return {"T": T, "alpha": alpha, "lhs": float(lhs), "hatE0": float(hat[0]),
            "damping_sq": d_sq, "trace_sq": n_sq, "hatE_sq_integral": hat_sq,
            "bracket": float(bracket), "C_min": float(max(lhs, 0.0) / bracket)}


# -- contraction and absorbing balls ----------------------------------------

def fit_contraction(series: Sequence[float]):
    """Least-squares (eta, K) with e[m+1] ~ eta e[m] + K; returns (eta, K, relative residual).

    The residual is the 2-norm of the misfit over the 2-norm of e[1:].
    """
    e = np.asarray(series, dtype=float)
    if len(e) < 3:
        raise ValueError("need at least three window values to fit a contraction")
    A = np.stack([e[:-1], np.ones(len(e) - 1)], axis=1)
    (eta, K), *_ = np.linalg.lstsq(A, e[1:], rcond=None)
    misfit = A @ np.array([eta, K]) - e[1:]
    scale = np.linalg.norm(e[1:])
    resid = float(np.linalg.norm(misfit) / scale) if scale > 0 else 0.0
    return float(eta), float(K), resid


def detect_entry(times: np.ndarray, hat: np.ndarray, radius: float, window_T: float) -> Optional[float]:
    """First time after which hatE stays <= radius to the horizon, if that stretch spans a window."""
    above = np.flatnonzero(hat > radius)
    k = 0 if above.size == 0 else int(above[-1]) + 1
    if k >= len(times) or times[-1] - times[k] < window_T - 1e-12:
        return None
    return float(times[k])


@dataclass
class AbsorbingMember:
    initial_hat: float
    entry_time: Optional[float]
    post_entry_sup: Optional[float]
    eta: Optional[float]
    kbar: Optional[float]
    fit_residual: float
    contraction_detected: bool
    window_values: List[float]
    error: Optional[str] = None


@dataclass
class AbsorbingReport:
    members: List[AbsorbingMember]
    ball_radius: Optional[float]
    candidate_radius: float
    rejected_radii: List[float]
    window_T: float
    horizon: float
    M: float
    fit_threshold: float
    star_shaped: bool
    records: List[TrajectoryRecord] = field(default_factory=list, repr=False)  # not serialised

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "records"}
        out["members"] = [asdict(m) for m in self.members]
        return out


def thread_cap(default: Optional[int] = None) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return value
    return default or os.cpu_count() or 1


def default_window(mesh: Mesh, params: PhysicsParams, periods: int = 20) -> float:
    """``periods`` fundamental periods of the linear hinged problem."""
    lam = smallest_eigenvalue("HD", mesh, params)
    return periods * 2.0 * np.pi / np.sqrt(lam)


def absorbing_ball_experiment(family: Sequence[PlateState], mesh: Mesh, params: PhysicsParams,
                              law: DampingLaw, cfg: StepperConfig, horizon: float,
                              window_T: Optional[float] = None, M: Optional[float] = None,
                              radius_factor: float = 2.0, fit_threshold: float = 0.05,
                              max_workers: Optional[int] = None) -> AbsorbingReport:
    """Run a family of HD trajectories and measure entry into a common ball.

    The candidate radius starts at ``radius_factor`` times the largest hatE
    seen in the final window; a member whose energy does not stay below it
    for a full window rejects the candidate, which is enlarged by half and
    re-tested.  Contraction is fitted on scriptE_M sampled every window.
    """
    mesh.spec.check_configuration("HD")
    check = verify_damping_assumption(law)
    if not check.passed:
        raise ValueError(f"damping law {law.name!r} fails the slope assumption: {check.failed_checks}")
    centre = np.array(mesh.spec.extents) / 2.0
    star = check_star_shaped(mesh.spec, centre).satisfied
    window_T = window_T or default_window(mesh, params)
    if not 0 < window_T <= horizon:
        raise ValueError("window length must lie in (0, horizon]")
    M = potential_bound_m(params, 0.25, mesh) if M is None else M
    stride = max(1, int(round(window_T / cfg.dt)))

    def run(state):
        stepper = Stepper(mesh, "HD", params, law, cfg)
        return run_trajectory(stepper, state, horizon, record_stride=stride, M=M)

    Stepper(mesh, "HD", params, law, cfg)  # assemble shared operators once, before threads start
    workers = max(1, min(max_workers or thread_cap(), len(family)))
    if workers == 1:
        records = [run(s) for s in family]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, family))

    final = [r.series("hatE")[r.times >= r.times[-1] - window_T] for r in records]
    radius = radius_factor * max(float(np.max(f)) for f in final)
    rejected = []
    for _ in range(60):
        entries = [detect_entry(r.times, r.series("hatE"), radius, window_T) for r in records]
        if all(e is not None for e in entries):
            break
        rejected.append(radius)
        radius *= 1.5
    members = []
    for rec, entry in zip(records, entries):
        hat = rec.series("hatE")
        em = rec.series("scriptEM")[::stride]
        eta = kbar = None
        resid = np.inf
        if len(em) >= 3:
            eta_fit, k_fit, resid = fit_contraction(em)
            if resid < fit_threshold:
                eta, kbar = eta_fit, k_fit
        sup = None if entry is None else float(np.max(hat[rec.times >= entry]))
        members.append(AbsorbingMember(
            initial_hat=float(hat[0]), entry_time=entry, post_entry_sup=sup, eta=eta, kbar=kbar,
            fit_residual=float(resid), contraction_detected=eta is not None and 0 < eta < 1,
            window_values=[float(x) for x in em], error=rec.error))
    sups = [m.post_entry_sup for m in members]
    ball = None if any(s is None for s in sups) else max(sups, default=0.0)
    return AbsorbingReport(members, ball, float(radius), rejected, float(window_T), float(horizon),
                           float(M), fit_threshold, bool(star), records)


# -- differences of solutions -------------------------------------------------

@dataclass
class DifferenceAudit:
    times: np.ndarray
    E_z: np.ndarray
    lhs: float  # int (F(z), z_t)
    rhs: float  # bracket terms plus the two time integrals
    residual: float
    terms: Dict[str, float]
    rhs_as_printed: float  # with the opposite sign on the (|grad u|^2 - |grad w|^2)(Lap w, z) bracket
    key_constant: float  # smallest C making the key inequality hold on every sub-window
    key_slack: float
    epsilon: float
    eta: float


def _check_pair(ru: TrajectoryRecord, rw: TrajectoryRecord):
    if not ru.mesh.same_as(rw.mesh) or ru.configuration != rw.configuration:
        raise ValueError("records live on different meshes or configurations")
    if ru.params is not rw.params and not (
            ru.params.gamma == rw.params.gamma and ru.params.mu == rw.params.mu
            and ru.params.mu1 == rw.params.mu1
            and np.array_equal(ru.params.load(ru.mesh), rw.params.load(rw.mesh))):
        raise ValueError("records use different physical parameters")
    if (ru.law is None) != (rw.law is None) or (ru.law is not None and ru.law.describe() != rw.law.describe()):
        raise ValueError("records use different damping laws")
    if ru.cfg != rw.cfg:
        raise ValueError("records use different stepper settings")
    ru.require_every_step()
    rw.require_every_step()
    if len(ru.snapshots) != len(rw.snapshots) or not np.allclose(ru.snapshot_times, rw.snapshot_times):
        raise ValueError("records cover different times")


def _difference_energy(mesh: Mesh, params: PhysicsParams, su: PlateState, sw: PlateState) -> float:
    z = su.u - sw.u
    zt = su.v - sw.v
    return 0.5 * (bilinear_a(mesh, z, z, params) + mesh.norm_sq(zt))


def difference_energy_decay(record_u: TrajectoryRecord, record_w: TrajectoryRecord) -> np.ndarray:
    """E_z(t) = (a(z, z) + |z_t|^2) / 2 for z = u - w at every stored step."""
    _check_pair(record_u, record_w)
    mesh, params = record_u.mesh, record_u.params
    return np.array([_difference_energy(mesh, params, a, b)
                     for a, b in zip(record_u.snapshots, record_w.snapshots)])


def difference_decomposition_audit(record_u: TrajectoryRecord, record_w: TrajectoryRecord, window=None,
                                   epsilon: float = 0.5, eta: float = 0.5) -> DifferenceAudit:
    """Both sides of the decomposition of the Berger difference term.

    With z = u - w, b = |grad z|^2, a_u = |grad u|^2 and F(z) = f(u) - f(w),
    f(u) = (gamma - a_u) Lap u:

        int_s^t (F(z), z_t) = [(F(z), z) + gamma b/2 - a_u b/2 + (a_u - a_w)(Lap w, z)]_s^t
                              - int_s^t (a_u - a_w)(Lap w, z_t) + int_s^t (Lap u, u_t) b.

    The key inequality |int_tau^t (F, z_t)| <= eps int_tau^t E_z + C sup |z|^2_{2-eta}
    is checked on every sub-window ending at t with the smallest such C.
    """
    _check_pair(record_u, record_w)
    mesh, params = record_u.mesh, record_u.params
    times, su, mu = _window_states(record_u, window)
    _, sw, mw = _window_states(record_w, window)
    gamma = params.gamma
    theta = 1.0 - eta / 2.0

    def sample(a: PlateState, b: PlateState) -> dict:
        z, zt = a.u - b.u, a.v - b.v
        lu, lw = laplacian(mesh, a.u), laplacian(mesh, b.u)
        au, aw = gradient_norm_sq(mesh, a.u), gradient_norm_sq(mesh, b.u)
        F = (gamma - au) * lu - (gamma - aw) * lw
        az = bilinear_a(mesh, z, z, params)
        return {
            "Fzt": mesh.inner(F, zt), "Fz": mesh.inner(F, z), "b": gradient_norm_sq(mesh, z),
            "au": au, "aw": aw, "lwz": mesh.inner(lw, z), "lwzt": mesh.inner(lw, zt),
            "luut": mesh.inner(lu, a.v), "Ez": 0.5 * (az + mesh.norm_sq(zt)),
            "zproxy": mesh.norm_sq(z) ** (1.0 - theta) * max(az, 0.0) ** theta,
        }

    def table(rows):
        return {k: np.array([r[k] for r in rows]) for k in rows[0]} if rows else {}

    nodes = table([sample(a, b) for a, b in zip(su, sw)])
    mids = table([sample(a, b) for a, b in zip(mu, mw)])
    dts = np.diff(times)

    def bracket(c, sign=1.0):
        return (c["Fz"] + 0.5 * gamma * c["b"] - 0.5 * c["au"] * c["b"]
                + sign * (c["au"] - c["aw"]) * c["lwz"])

    if mids:
        lhs = float(np.sum(mids["Fzt"] * dts))
        cross = float(np.sum((mids["au"] - mids["aw"]) * mids["lwzt"] * dts))
        transport = float(np.sum(mids["luut"] * mids["b"] * dts))
    else:
        lhs = cross = transport = 0.0
    B, Bp = bracket(nodes), bracket(nodes, -1.0)
    rhs = float(B[-1] - B[0] - cross + transport)
    rhs_printed = float(Bp[-1] - Bp[0] - cross + transport)

    # key inequality on every sub-window [tau_k, t]
    def tail(y_mid):
        seg = y_mid * dts
        return np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    if mids:
        I = np.abs(tail(mids["Fzt"]))
        Ez_int = tail(0.5 * (nodes["Ez"][1:] + nodes["Ez"][:-1]))
    else:
        I = Ez_int = np.zeros(len(times))
    sup_z = np.maximum.accumulate(nodes["zproxy"][::-1])[::-1]
    safe = np.where(sup_z > 0, sup_z, 1.0)
    need = np.where(sup_z > 0, (I - epsilon * Ez_int) / safe, 0.0)
    C = float(max(0.0, np.max(need)))
    slack = float(np.min(epsilon * Ez_int + C * sup_z - I))
    terms = {"bracket_end": float(B[-1]), "bracket_start": float(B[0]),
             "cross_integral": -cross, "transport_integral": transport}
    return DifferenceAudit(times, nodes["Ez"], lhs, rhs, abs(lhs - rhs), terms, rhs_printed,
                           C, slack, epsilon, eta)


# -- attractor proxy -----------------------------------------------------------

def _energy_features(mesh: Mesh, states: Sequence[PlateState]) -> np.ndarray:
    w = np.sqrt(mesh.weights[mesh.physical]).ravel()
    rows = []
    for s in states:
        lap = laplacian(mesh, s.u)[mesh.physical].ravel()
        rows.append(np.concatenate([w * lap, w * s.v[mesh.physical].ravel()]))
    return np.array(rows)


def hausdorff_semidistance(mesh: Mesh, cloud_a: Sequence[PlateState], cloud_b: Sequence[PlateState]) -> float:
    """sup over A of the distance to B, in the norm (|Lap u|^2 + |v|^2)^(1/2)."""
    if not cloud_a:
        return 0.0
    if not cloud_b:
        return float("inf")
    d = cdist(_energy_features(mesh, cloud_a), _energy_features(mesh, cloud_b))
    return float(np.max(np.min(d, axis=1)))
