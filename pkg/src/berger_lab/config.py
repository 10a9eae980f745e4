"""Run configuration: a strict JSON document resolved into solver objects.

Unknown keys are rejected at every level.  Defaults are resolved at parse
time (including the time step), so serialising a parsed config and parsing
it again yields the same RunConfig.
"""

from __future__ import annotations

import json
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .damping import LAWS, DampingLaw, make_law
from .dynamics import (Stepper, StepperConfig, PlateState, bump, cantilever_beta, cantilever_mode,
                       eigenmode, scale_to_hat_energy)
from .geometry import DomainSpec, GeometryError, Mesh, build_mesh
from .operators import PhysicsParams

CONFIGURATIONS = {"HD1D": ("HD", "interval"), "HD2D": ("HD", "rectangle"), "FCD1D": ("FCD", "interval")}
COMMANDS = ("simulate", "audit", "absorb", "diff", "converge")
STEPS_PER_PERIOD = 200
SNAPSHOTS = 20  # default number of written snapshots per run
U64 = 2**64


class ConfigError(ValueError):
    """Invalid configuration document; maps to exit code 1."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainConfig(_Strict):
    kind: Literal["interval", "rectangle"]
    extents: List[float] = Field(default_factory=lambda: [1.0])

    @model_validator(mode="before")
    @classmethod
    def _dims(cls, data):
        if isinstance(data, dict) and data.get("kind") == "rectangle":
            ext = data.get("extents", [1.0])
            if isinstance(ext, list) and len(ext) == 1:
                data = dict(data, extents=ext * 2)
        return data

    @model_validator(mode="after")
    def _check(self):
        need = 1 if self.kind == "interval" else 2
        if len(self.extents) != need:
            raise ValueError(f"{self.kind} needs {need} extent(s)")
        if not all(e > 0 for e in self.extents):
            raise ValueError("extents must be positive")
        return self


class LoadConfig(_Strict):
    profile: Literal["zero", "constant", "sine", "quadratic"] = "zero"
    amplitude: float = 0.0


class PhysicsConfig(_Strict):
    gamma: float = Field(0.0, ge=0)
    mu: float = Field(1.0, gt=0, le=1)
    mu1: float = Field(0.0, ge=0)
    load: Union[float, LoadConfig] = 0.0


class DampingConfig(_Strict):
    law: str = "linear"
    params: Dict[str, float] = Field(default_factory=dict)


class StepperSection(_Strict):
    dt: Optional[float] = Field(None, gt=0)
    picard_iterations: int = Field(8, ge=1)
    picard_tolerance: float = Field(1e-10, gt=0)
    linearized: bool = False


class InitialConfig(_Strict):
    profile: Literal["zero", "eigenmode", "bump", "cantilever", "random"] = "zero"
    amplitude: float = 0.0  # displacement scale
    velocity_amplitude: float = 0.0  # velocity scale, same shape
    modes: List[int] = Field(default_factory=lambda: [1, 1])
    power: int = Field(6, ge=2)
    hat_energy: Optional[float] = Field(None, ge=0)  # rescale (u, v) jointly to this hatE


class AuditConfig(_Strict):
    flux_anchor: Optional[List[float]] = None
    window: Optional[Tuple[float, float]] = None
    epsilon: float = Field(0.25, gt=0)
    pair_scale: float = 0.8  # second run of the decomposition audit uses scaled initial data


class AbsorbConfig(_Strict):
    family: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])
    window: Optional[float] = Field(None, gt=0)
    radius_factor: float = Field(2.0, gt=0)
    fit_threshold: float = Field(0.05, gt=0)


class DiffConfig(_Strict):
    second: Optional[InitialConfig] = None  # defaults to the first datum scaled by 0.8
    epsilon: float = Field(0.5, gt=0)
    eta: float = Field(0.5, gt=0, lt=2)


class ConvergeConfig(_Strict):
    quantity: Literal["eigenmode", "balance"] = "eigenmode"
    levels: int = Field(3, ge=2)


class ExperimentConfig(_Strict):
    kind: Literal["simulate", "audit", "absorb", "diff", "converge"] = "simulate"
    snapshot_every: Optional[int] = Field(None, ge=1)  # steps between written snapshots
    audit: AuditConfig = Field(default_factory=AuditConfig)
    absorb: AbsorbConfig = Field(default_factory=AbsorbConfig)
    diff: DiffConfig = Field(default_factory=DiffConfig)
    converge: ConvergeConfig = Field(default_factory=ConvergeConfig)


class RunConfig(_Strict):
    configuration: Literal["HD1D", "HD2D", "FCD1D"] = "HD2D"
    domain: DomainConfig
    resolution: Optional[List[int]] = None
    horizon: float = Field(gt=0)
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    damping: Optional[DampingConfig] = None
    stepper: StepperSection = Field(default_factory=StepperSection)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    output: str = "berger-lab-out"
    seed: int = Field(0, ge=0, lt=U64)

    # -- resolved objects -------------------------------------------------------
    @property
    def kind(self) -> str:
        return CONFIGURATIONS[self.configuration][0]

    def domain_spec(self) -> DomainSpec:
        if self.kind == "FCD":
            return DomainSpec.free_clamped_interval(self.domain.extents[0])
        return DomainSpec(self.domain.kind, tuple(self.domain.extents))

    def mesh(self, resolution=None) -> Mesh:
        return build_mesh(self.domain_spec(), resolution or self.resolution, self.kind)

    def params(self, mesh: Mesh) -> PhysicsParams:
        ph = self.physics
        return PhysicsParams(gamma=ph.gamma, p=load_field(mesh, ph.load), mu=ph.mu, mu1=ph.mu1)

    def law(self) -> Optional[DampingLaw]:
        if self.kind == "FCD":
            return None
        return make_law(self.damping.law, **self.damping.params)

    def stepper_config(self, dt: Optional[float] = None) -> StepperConfig:
        s = self.stepper
        return StepperConfig(dt=dt or s.dt, picard_iterations=s.picard_iterations,
                             picard_tolerance=s.picard_tolerance, linearized=s.linearized)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- fields from named profiles --------------------------------------------------

def load_field(mesh: Mesh, load) -> np.ndarray:
    if isinstance(load, (int, float)):
        load = LoadConfig(profile="constant", amplitude=float(load))
    A, ext = load.amplitude, mesh.spec.extents
    if load.profile == "zero" or A == 0:
        return np.zeros(mesh.field_shape)
    if load.profile == "constant":
        return np.full(mesh.field_shape, A)
    if load.profile == "sine":
        return A * eigenmode(mesh, (1,) * mesh.dim)

    def quad(*xs):
        out = np.ones_like(xs[0])
        for x, L in zip(xs, ext):
            out = out * (x / L) ** 2
        return out

    return A * mesh.sample(quad)


def shape_field(mesh: Mesh, configuration: str, init: InitialConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale displacement shape of a named initial profile."""
    if init.profile == "zero":
        return np.zeros(mesh.field_shape)
    if init.profile == "eigenmode":
        if configuration == "FCD":
            return cantilever_mode(mesh, init.modes[0])
        return eigenmode(mesh, tuple(init.modes[:mesh.dim]))
    if init.profile == "bump":
        return bump(mesh, init.power)
    if init.profile == "cantilever":
        if configuration != "FCD":
            raise ConfigError("initial profile 'cantilever' needs FCD1D")
        return cantilever_mode(mesh, init.modes[0])
    # random: smooth combination of low modes
    out = np.zeros(mesh.field_shape)
    if configuration == "FCD":
        for n in (1, 2, 3):
            out += rng.standard_normal() / n**2 * cantilever_mode(mesh, n)
        return out
    for modes in np.ndindex(*(3,) * mesh.dim):
        m = tuple(k + 1 for k in modes)
        out += rng.standard_normal() / float(np.sum(np.square(m))) * eigenmode(mesh, m)
    return out


def initial_state(stepper: Stepper, init: InitialConfig, rng: np.random.Generator) -> PlateState:
    shape = shape_field(stepper.mesh, stepper.configuration, init, rng)
    u, v = init.amplitude * shape, init.velocity_amplitude * shape
    if init.hat_energy is not None:
        if not (np.any(u) or np.any(v)):
            raise ConfigError("hat_energy needs a non-zero initial shape or amplitude")
        return scale_to_hat_energy(stepper, u, v, init.hat_energy)
    return stepper.state_from_values(u, v)


def fundamental_frequency(configuration: str, extents) -> float:
    """Lowest linear frequency of the continuous problem (hinged or cantilever)."""
    if configuration == "FCD1D":
        return cantilever_beta(1) ** 2 / extents[0] ** 2
    return float(sum((np.pi / L) ** 2 for L in extents))


def default_dt(configuration: str, extents) -> float:
    """STEPS_PER_PERIOD steps per fundamental period, rounded down to 3 significant digits."""
    dt = 2.0 * np.pi / fundamental_frequency(configuration, extents) / STEPS_PER_PERIOD
    scale = 10.0 ** (np.floor(np.log10(dt)) - 2)
    return float(np.floor(dt / scale) * scale)


# -- parsing ------------------------------------------------------------------------

def _format_loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def _resolve(doc: dict) -> dict:
    """Fill configuration-dependent defaults before validation."""
    conf = doc.get("configuration", "HD2D")
    if conf not in CONFIGURATIONS:
        raise ConfigError(f"configuration: unknown configuration {conf!r}")
    kind, domain_kind = CONFIGURATIONS[conf]
    dom = doc.get("domain")
    if not isinstance(dom, dict):
        raise ConfigError("domain: required object is missing")
    if dom.get("kind", domain_kind) != domain_kind:
        raise ConfigError(f"configuration/domain mismatch: {conf} needs domain kind {domain_kind!r}, got {dom.get('kind')!r}")
    doc = dict(doc, configuration=conf, domain=dict(dom, kind=domain_kind))
    dim = 1 if domain_kind == "interval" else 2
    res = doc.get("resolution")
    if res is None:
        res = [65] if dim == 1 else [33, 33]
    elif isinstance(res, int):
        res = [res] * dim
    doc["resolution"] = res
    damping = doc.get("damping")
    if kind == "FCD":
        if damping is not None and damping.get("law") != "septic":
            raise ConfigError("damping.law: FCD1D uses the fixed septic free-end feedback")
        doc["damping"] = None
    else:
        damping = dict(damping or {})
        damping.setdefault("law", "linear")
        if damping["law"] not in LAWS:
            raise ConfigError(f"damping.law: unknown damping law {damping['law']!r}")
        params = dict(damping.get("params") or {})
        if damping["law"] == "linear":
            params.setdefault("k", 1.0)
        damping["params"] = params
        doc["damping"] = damping
    return doc


def parse_config(text: str, command: Optional[str] = None, seed: Optional[int] = None,
                 output: Optional[str] = None) -> RunConfig:
    """Parse a JSON document into a fully resolved RunConfig.

    ``command``, ``seed`` and ``output`` override the document (command-line
    values win).  Raises ConfigError with a line number or key path.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>: the configuration must be a JSON object")
    doc = _resolve(doc)
    if command is not None:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        doc["experiment"] = dict(doc.get("experiment") or {}, kind=command)
    if seed is not None:
        doc["seed"] = seed
    if output is not None:
        doc["output"] = output
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(f"{_format_loc(err['loc'])}: {err['msg']}") from None
    try:
        spec = cfg.domain_spec()
        build_mesh(spec, cfg.resolution, cfg.kind)
        cfg.law()
    except GeometryError as exc:
        raise ConfigError(f"domain: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"damping: {exc}") from None
    if cfg.initial.profile == "cantilever" and cfg.kind != "FCD":
        raise ConfigError("initial.profile: 'cantilever' needs FCD1D")
    if cfg.stepper.dt is None:
        dt = default_dt(cfg.configuration, cfg.domain.extents)
        cfg = cfg.model_copy(update={"stepper": cfg.stepper.model_copy(update={"dt": dt})})
    steps = int(round(cfg.horizon / cfg.stepper.dt))
    if steps < 1:
        raise ConfigError("horizon: shorter than one time step")
    if cfg.experiment.snapshot_every is None:
        every = max(1, steps // SNAPSHOTS)
        cfg = cfg.model_copy(update={"experiment": cfg.experiment.model_copy(update={"snapshot_every": every})})
    return cfg


def load_config(path, **overrides) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, **overrides)
