"""Command-line front end: berger-lab <command> --config <path> [--out <dir>] [--seed <u64>].

Exit codes: 0 success, 1 configuration error, 2 numerical failure.  Every
run writes CSV series, JSON reports, BPLT snapshots and a manifest listing
each emitted file with its sha256 digest.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import struct
import sys
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .config import COMMANDS, U64, ConfigError, RunConfig, initial_state, load_config, shape_field
from .damping import verify_damping_assumption, zero
from .dynamics import (PicardError, PlateState, Stepper, TrajectoryRecord, eigenmode, run_trajectory,
                       scale_to_hat_energy)
from .energetics import (FIELDS, compute_energies, energetic_equivalence, energy_balance_residual_fcd,
                         energy_balance_residual_hd, potential_bound_holds, potential_bound_m)
from .geometry import Mesh, flux_field
from .longtime import (absorbing_ball_experiment, difference_decomposition_audit,
                       difference_energy_decay, multiplier_audit, observability_constant, thread_cap)
from .operators import PhysicsParams

BPLT_MAGIC = b"BPLT"
BPLT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class NumericalFailure(RuntimeError):
    """A run stopped early or produced non-finite values; maps to exit code 2."""


# -- serialisation ---------------------------------------------------------------

def _plain(obj):
    """JSON-ready copy: numpy scalars/arrays unwrapped, non-finite floats as null."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def dumps_csv(header: List[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def encode_bplt(mesh: Mesh, values: np.ndarray, t: float) -> bytes:
    """Physical-node field as BPLT: magic, u32 version, u32 rows, u32 cols, f64 time, f64 data (LE)."""
    data = np.ascontiguousarray(values[mesh.physical], dtype="<f8")
    rows, cols = (1, data.shape[0]) if data.ndim == 1 else data.shape
    return BPLT_MAGIC + struct.pack("<IIId", BPLT_VERSION, rows, cols, float(t)) + data.tobytes()


def decode_bplt(blob: bytes):
    """(time, array of shape (rows, cols)) from a BPLT byte string."""
    if blob[:4] != BPLT_MAGIC:
        raise ValueError("not a BPLT snapshot")
    version, rows, cols, t = struct.unpack_from("<IIId", blob, 4)
    if version != BPLT_VERSION:
        raise ValueError(f"unsupported BPLT version {version}")
    data = np.frombuffer(blob, dtype="<f8", offset=24)
    if data.size != rows * cols:
        raise ValueError("BPLT payload size does not match its header")
    return t, data.reshape(rows, cols)


# -- manifest ---------------------------------------------------------------------

def _timestamp() -> str:
    """UTC now, or SOURCE_DATE_EPOCH when set (reproducible manifests)."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
           else _dt.datetime.now(_dt.timezone.utc))
    return now.replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    command: str
    config: dict
    artifact_version: str
    library_versions: Dict[str, str]
    started: str
    finished: str = ""
    status: str = "complete"  # "complete", "partial" (numerical failure) or "failed"
    error: Optional[str] = None
    files: List[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


class _Writer:
    """Writes files under one output directory and records their digests."""

    def __init__(self, root: Path):
        self.root = root
        self.files: List[dict] = []
        root.mkdir(parents=True, exist_ok=True)

    def bytes(self, rel: str, blob: bytes):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        self.files.append({"path": rel, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})

    def text(self, rel: str, text: str):
        self.bytes(rel, text.encode("utf-8"))


def verify_manifest(root) -> List[str]:
    """Paths whose digest no longer matches the manifest (empty when intact)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    bad = []
    for entry in manifest["files"]:
        p = root / entry["path"]
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != entry["sha256"]:
            bad.append(entry["path"])
    return bad


# -- shared pieces -----------------------------------------------------------------

@dataclass
class _Setup:
    mesh: Mesh
    params: PhysicsParams
    stepper: Stepper
    M: float


def _setup(cfg: RunConfig, resolution=None, dt=None, params=None, law="config", linearized=None) -> _Setup:
    mesh = cfg.mesh(resolution)
    params = params(mesh) if callable(params) else (params or cfg.params(mesh))
    scfg = cfg.stepper_config(dt)
    if linearized is not None:
        scfg = scfg.with_(linearized=linearized)
    law = cfg.law() if law == "config" else law
    stepper = Stepper(mesh, cfg.kind, params, law, scfg)
    return _Setup(mesh, params, stepper, potential_bound_m(params, 0.25, mesh, cfg.kind))


def _run(setup: _Setup, state: PlateState, horizon: float, stride: int = 1) -> TrajectoryRecord:
    return run_trajectory(setup.stepper, state, horizon, record_stride=stride, M=setup.M)


def _energy_csv(rec: TrajectoryRecord) -> str:
    rows = [[getattr(r, f) for f in FIELDS] + [k] for r, k in zip(rec.rows, rec.picard)]
    return dumps_csv(list(FIELDS) + ["picard_iterations"], rows)


def _write_snapshots(out: _Writer, mesh: Mesh, states, every: int, prefix: str = "snapshots"):
    """Every ``every``-th state plus the last, as u_/v_ BPLT pairs."""
    keep = list(range(0, len(states), every))
    if keep[-1] != len(states) - 1:
        keep.append(len(states) - 1)
    for k in keep:
        s = states[k]
        out.bytes(f"{prefix}/u_{k:06d}.bplt", encode_bplt(mesh, s.u, s.t))
        out.bytes(f"{prefix}/v_{k:06d}.bplt", encode_bplt(mesh, s.v, s.t))


def _failure(rec: TrajectoryRecord) -> Optional[str]:
    if rec.incomplete:
        return f"run stopped at t = {rec.rows[-1].t}: {rec.error}"
    for r in rec.rows:
        if not all(np.isfinite(getattr(r, f)) for f in FIELDS):
            return f"non-finite energy at t = {r.t}"
    return None


def _summary(rec: TrajectoryRecord) -> dict:
    first, last = rec.rows[0], rec.rows[-1]
    return {"initial": first.as_dict(), "final": last.as_dict(), "steps": len(rec.rows) - 1,
            "max_picard_iterations": int(max(rec.picard)), "incomplete": rec.incomplete,
            "error": rec.error, "M_quarter": rec.M}


def _snapshot_bounds(rec: TrajectoryRecord, epsilon: float) -> dict:
    """Potential bound at ``epsilon`` and the energetic equivalence on every snapshot."""
    mesh, params = rec.mesh, rec.params
    M_eps = potential_bound_m(params, epsilon, mesh, rec.configuration)
    M_q = potential_bound_m(params, 0.25, mesh, rec.configuration)
    pot_viol = equiv_viol = 0
    worst = -np.inf
    for s in rec.snapshots:
        lhs, rhs = potential_bound_holds(mesh, s.u, params, epsilon, M_eps)
        pot_viol += int(lhs > rhs)
        worst = max(worst, lhs - rhs)
        ok, _, _ = energetic_equivalence(compute_energies(mesh, s, params), M_q)
        equiv_viol += int(not ok)
    return {"epsilon": epsilon, "M": M_eps, "potential_bound_violations": pot_viol,
            "potential_bound_worst_margin": float(worst), "M_quarter": M_q,
            "equivalence_violations": equiv_viol, "snapshots": len(rec.snapshots)}


def _balance(rec: TrajectoryRecord) -> dict:
    T = float(rec.times[-1] - rec.times[0])
    if rec.configuration == "HD":
        res, nondiss = energy_balance_residual_hd(rec), None
    else:
        res, nondiss = energy_balance_residual_fcd(rec)
    return {"residual": res, "residual_per_unit_time": abs(res) / T if T > 0 else 0.0,
            "nondissipative_integral": nondiss, "window": [float(rec.times[0]), float(rec.times[-1])]}


def _scaled(state: PlateState, factor: float) -> PlateState:
    return PlateState(factor * state.u, factor * state.v, state.t)


# -- commands ------------------------------------------------------------------------

def _simulate(cfg: RunConfig, out: _Writer, rng) -> Optional[str]:
    st = _setup(cfg)
    rec = _run(st, initial_state(st.stepper, cfg.initial, rng), cfg.horizon, cfg.experiment.snapshot_every)
    out.text("energies.csv", _energy_csv(rec))
    out.text("summary.json", dumps_json(_summary(rec)))
    _write_snapshots(out, st.mesh, rec.snapshots, 1)
    return _failure(rec)


def _audit(cfg: RunConfig, out: _Writer, rng) -> Optional[str]:
    a = cfg.experiment.audit
    st = _setup(cfg)
    init = initial_state(st.stepper, cfg.initial, rng)
    rec = _run(st, init, cfg.horizon)
    out.text("energies.csv", _energy_csv(rec))
    _write_snapshots(out, st.mesh, rec.snapshots, cfg.experiment.snapshot_every)
    failure = _failure(rec)
    report = {"summary": _summary(rec)}
    if failure is None:
        report["balance"] = _balance(rec)
        report["bounds"] = _snapshot_bounds(rec, a.epsilon)
        if cfg.kind == "HD":
            window = tuple(a.window) if a.window else None
            anchor = a.flux_anchor or [0.5 * L for L in cfg.domain.extents]
            flux = flux_field(st.mesh, anchor)
            for name in ("equipartition", "flux"):
                r = multiplier_audit(rec, name, flux=flux, window=window)
                report[name] = dict(asdict(r), lhs_total=r.lhs_total, rhs_total=r.rhs_total)
            report["observability"] = observability_constant(rec)
            law = st.stepper.law
            if law is not None:
                report["damping_assumption"] = asdict(verify_damping_assumption(law))
            pair = _run(st, _scaled(init, a.pair_scale), cfg.horizon)
            failure = _failure(pair)
            if failure is None:
                d = difference_decomposition_audit(rec, pair, window=window)
                report["decomposition"] = {k: v for k, v in asdict(d).items() if k not in ("times", "E_z")}
                report["decomposition"]["pair_scale"] = a.pair_scale
    out.text("audit.json", dumps_json(report))
    return failure


def _absorb(cfg: RunConfig, out: _Writer, rng) -> Optional[str]:
    if cfg.kind != "HD":
        raise ConfigError("absorb: the absorbing-ball experiment runs on hinged configurations")
    b = cfg.experiment.absorb
    st = _setup(cfg)
    shape = shape_field(st.mesh, cfg.kind, cfg.initial, rng)
    u = (cfg.initial.amplitude or 1.0) * shape
    v = cfg.initial.velocity_amplitude * shape
    if not np.any(shape[st.mesh.physical]):
        raise ConfigError("initial.profile: the absorbing family needs a non-zero initial shape")
    family = [scale_to_hat_energy(st.stepper, u, v, e) for e in b.family]
    report = absorbing_ball_experiment(family, st.mesh, st.params, st.stepper.law, st.stepper.cfg,
                                       cfg.horizon, window_T=b.window, M=st.M,
                                       radius_factor=b.radius_factor, fit_threshold=b.fit_threshold)
    rows = [[i, k, m.initial_hat, val] for i, m in enumerate(report.members)
            for k, val in enumerate(m.window_values)]
    out.text("absorb_windows.csv", dumps_csv(["member", "window", "initial_hatE", "scriptEM"], rows))
    out.text("absorb.json", dumps_json(report.as_dict()))
    errors = [m.error for m in report.members if m.error]
    return f"absorbing-family run failed: {errors[0]}" if errors else None


def _diff(cfg: RunConfig, out: _Writer, rng) -> Optional[str]:
    d = cfg.experiment.diff
    st = _setup(cfg)
    first = initial_state(st.stepper, cfg.initial, rng)
    second = _scaled(first, 0.8) if d.second is None else initial_state(st.stepper, d.second, rng)
    ru = _run(st, first, cfg.horizon)
    rw = _run(st, second, cfg.horizon)
    failure = _failure(ru) or _failure(rw)
    _write_snapshots(out, st.mesh, ru.snapshots, cfg.experiment.snapshot_every, "snapshots/u_run")
    _write_snapshots(out, st.mesh, rw.snapshots, cfg.experiment.snapshot_every, "snapshots/w_run")
    if failure is not None:
        out.text("diff.json", dumps_json({"error": failure}))
        return failure
    Ez = difference_energy_decay(ru, rw)
    out.text("difference.csv", dumps_csv(["t", "E_z"], zip(ru.times, Ez)))
    report = {"E_z_initial": Ez[0], "E_z_final": Ez[-1],
              "E_z_ratio": Ez[-1] / Ez[0] if Ez[0] > 0 else None}
    if cfg.kind == "HD":
        audit = difference_decomposition_audit(ru, rw, epsilon=d.epsilon, eta=d.eta)
        report["decomposition"] = {k: v for k, v in asdict(audit).items() if k not in ("times", "E_z")}
    out.text("diff.json", dumps_json(report))
    return None


def _eigen_error(cfg: RunConfig, resolution, dt) -> float:
    """Relative L2 error of the linear undamped hinged eigenmode against cos(omega t) mode."""
    st = _setup(cfg, resolution, dt, params=lambda m: PhysicsParams(mu=cfg.physics.mu),
                law=zero(), linearized=True)
    modes = tuple(cfg.initial.modes[:st.mesh.dim])
    shape = eigenmode(st.mesh, modes)
    rec = _run(st, st.stepper.state_from_values(shape, 0.0 * shape), cfg.horizon, stride=10**9)
    if rec.incomplete:
        raise NumericalFailure(rec.error)
    omega = sum((m * np.pi / L) ** 2 for m, L in zip(modes, cfg.domain.extents))
    last = rec.snapshots[-1]
    exact = np.cos(omega * last.t) * shape
    return float(np.sqrt(st.mesh.norm_sq(last.u - exact) / st.mesh.norm_sq(exact)))


def _converge(cfg: RunConfig, out: _Writer, rng) -> Optional[str]:
    c = cfg.experiment.converge
    if c.quantity == "eigenmode" and cfg.kind != "HD":
        raise ConfigError("experiment.converge.quantity: the eigenmode oracle is hinged only")
    rows, errors = [], []
    for level in range(c.levels):
        res = [(n - 1) * 2**level + 1 for n in cfg.resolution]
        dt = cfg.stepper.dt / 2**level
        if c.quantity == "eigenmode":
            err = _eigen_error(cfg, res, dt)
        else:
            st = _setup(cfg, res, dt)
            rec = _run(st, initial_state(st.stepper, cfg.initial, np.random.default_rng(cfg.seed)),
                       cfg.horizon, stride=10**9)
            failure = _failure(rec)
            if failure is not None:
                out.text("converge.csv", dumps_csv(["level", "resolution", "dt", "quantity", "observed_order"], rows))
                return failure
            err = _balance(rec)["residual_per_unit_time"]
        order = np.log2(errors[-1] / err) if errors and err > 0 and errors[-1] > 0 else None
        errors.append(err)
        rows.append([level, "x".join(map(str, res)), dt, err, order])
    header = ["level", "resolution", "dt", "quantity", "observed_order"]
    out.text("converge.csv", dumps_csv(header, rows))
    out.text("converge.json", dumps_json({"quantity": c.quantity, "levels": [dict(zip(header, r)) for r in rows]}))
    return None


RUNNERS = {"simulate": _simulate, "audit": _audit, "absorb": _absorb, "diff": _diff, "converge": _converge}


def execute(cfg: RunConfig) -> RunManifest:
    """Run the configured command, write its outputs and the manifest.

    Numerical failures are recorded in the manifest (status "partial") and
    then raised as NumericalFailure.  Parameter errors found while running
    mark the manifest "failed" and propagate.
    """
    command = cfg.experiment.kind
    out = _Writer(Path(cfg.output))
    # the output directory is left out of the snapshot so that identical runs
    # written to different places produce identical bytes
    snapshot = {k: v for k, v in cfg.to_dict().items() if k != "output"}
    manifest = RunManifest(command, snapshot, __version__,
                           {"numpy": np.__version__, "scipy": scipy.__version__}, _timestamp())
    out.text("config.json", dumps_json(snapshot))
    rng = np.random.default_rng(cfg.seed)
    failure = None
    try:
        failure = RUNNERS[command](cfg, out, rng)
    except (PicardError, FloatingPointError, NumericalFailure, np.linalg.LinAlgError, RuntimeError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        manifest.status, manifest.error = "failed", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        if failure is not None:
            manifest.status, manifest.error = "partial", failure
        manifest.finished = _timestamp()
        manifest.files = sorted(out.files, key=lambda f: f["path"])
        (out.root / "manifest.json").write_text(dumps_json(manifest.as_dict()), encoding="utf-8")
    if failure is not None:
        raise NumericalFailure(failure)
    return manifest


# -- entry point -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="berger-lab", description="Berger plate laboratory with boundary damping.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=_u64, help="random seed (overrides the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        thread_cap()
        cfg = load_config(args.config, command=args.command, seed=args.seed, output=args.out)
        manifest = execute(cfg)
    except ConfigError as exc:
        print(f"berger-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"berger-lab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # thread cap and experiment-level parameter checks
        print(f"berger-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"berger-lab: {manifest.command} complete, {len(manifest.files)} files in {cfg.output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
