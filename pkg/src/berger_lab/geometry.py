"""Structured meshes on an interval or an axis-aligned rectangle.

Every field lives on a padded array carrying two ghost layers beyond each
boundary.  1D fields have shape ``(nx + 4,)``; 2D fields have shape
``(ny + 4, nx + 4)`` and are indexed ``[j, i]`` (row-major, y rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

GHOSTS = 2

CLAMPED = "clamped"
FREE_DAMPED = "free-damped"
HINGED_DAMPED = "hinged-damped"
ROLES = (CLAMPED, FREE_DAMPED, HINGED_DAMPED)

INTERIOR, BOUNDARY, GHOST1, GHOST2, CORNER = 0, 1, 2, 3, 4

SEGMENTS = {
    "interval": ("left", "right"),
    "rectangle": ("left", "right", "bottom", "top"),
}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    extents: Tuple[float, ...]
    partition: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SEGMENTS:
            raise GeometryError(f"unknown domain kind {self.kind!r}")
        extents = tuple(float(e) for e in np.atleast_1d(self.extents))
        dim = 1 if self.kind == "interval" else 2
        if len(extents) != dim:
            raise GeometryError(f"{self.kind} needs {dim} extent(s), got {len(extents)}")
        if not all(np.isfinite(e) and e > 0 for e in extents):
            raise GeometryError("extents must be strictly positive")
        object.__setattr__(self, "extents", extents)
        partition = dict(self.partition) or {s: HINGED_DAMPED for s in SEGMENTS[self.kind]}
        for seg, role in partition.items():
            if seg not in SEGMENTS[self.kind]:
                raise GeometryError(f"segment {seg!r} does not exist on a {self.kind}")
            if role not in ROLES:
                raise GeometryError(f"unknown boundary role {role!r}")
        missing = set(SEGMENTS[self.kind]) - set(partition)
        if missing:
            raise GeometryError(f"boundary partition misses segments {sorted(missing)}")
        object.__setattr__(self, "partition", partition)

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def measure(self) -> float:
        return float(np.prod(self.extents))

    def configuration(self) -> str:
        """Return ``"HD"`` or ``"FCD"`` implied by the partition."""
        roles = [self.partition[s] for s in SEGMENTS[self.kind]]
        if all(r == HINGED_DAMPED for r in roles):
            return "HD"
        if self.kind == "interval" and sorted(roles) == sorted([CLAMPED, FREE_DAMPED]):
            return "FCD"
        raise GeometryError(f"inconsistent boundary partition {self.partition}")

    def check_configuration(self, configuration: str) -> None:
        if configuration not in ("HD", "FCD"):
            raise GeometryError(f"unknown configuration {configuration!r}")
        if configuration == "FCD" and self.kind != "interval":
            raise GeometryError("configuration/domain mismatch: FCD is only available on an interval")
        if self.configuration() != configuration:
            raise GeometryError(
                f"boundary partition {self.partition} is inconsistent with {configuration}"
            )

    @classmethod
    def hinged_interval(cls, length: float = 1.0) -> "DomainSpec":
        return cls("interval", (length,))

    @classmethod
    def hinged_rectangle(cls, lx: float = 1.0, ly: float = 1.0) -> "DomainSpec":
        return cls("rectangle", (lx, ly))

    @classmethod
    def free_clamped_interval(cls, length: float = 1.0) -> "DomainSpec":
        return cls("interval", (length,), {"left": CLAMPED, "right": FREE_DAMPED})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "extents": list(self.extents), "partition": dict(self.partition)}

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        return cls(data["kind"], tuple(data["extents"]), dict(data.get("partition", {})))


@dataclass(frozen=True, eq=False)
class Segment:
    """One straight boundary segment.

    ``nodes`` indexes the padded array at the segment's non-corner nodes;
    ``inward[k]`` / ``ghost[k]`` index the nodes k+1 steps inside / outside.
    ``line`` covers the full edge including corners (used for ghost filling).
    """

    name: str
    role: str
    normal: np.ndarray
    tangent: np.ndarray
    spacing: float  # normal-direction spacing
    nodes: tuple
    inward: Tuple[tuple, tuple]
    ghost: Tuple[tuple, tuple]
    weights: np.ndarray
    line: tuple
    line_inward: Tuple[tuple, tuple]
    line_ghost: Tuple[tuple, tuple]
    tangential_spacing: float = 0.0

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class Mesh:
    spec: DomainSpec
    shape: Tuple[int, ...]  # physical nodes per axis, (nx,) or (nx, ny)
    spacing: Tuple[float, ...]
    coords: Tuple[np.ndarray, ...]  # padded coordinate arrays broadcast to the field shape
    classification: np.ndarray
    weights: np.ndarray  # trapezoid area weights, zero outside the physical domain
    segments: Dict[str, Segment]

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def field_shape(self) -> Tuple[int, ...]:
        if self.dim == 1:
            return (self.shape[0] + 2 * GHOSTS,)
        return (self.shape[1] + 2 * GHOSTS, self.shape[0] + 2 * GHOSTS)

    @property
    def physical(self) -> tuple:
        g = GHOSTS
        if self.dim == 1:
            return (slice(g, g + self.shape[0]),)
        return (slice(g, g + self.shape[1]), slice(g, g + self.shape[0]))

    @property
    def interior(self) -> tuple:
        g = GHOSTS
        if self.dim == 1:
            return (slice(g + 1, g + self.shape[0] - 1),)
        return (slice(g + 1, g + self.shape[1] - 1), slice(g + 1, g + self.shape[0] - 1))

    @property
    def physical_mask(self) -> np.ndarray:
        m = np.zeros(self.field_shape, dtype=bool)
        m[self.physical] = True
        return m

    @property
    def interior_mask(self) -> np.ndarray:
        return self.classification == INTERIOR

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def zeros(self) -> np.ndarray:
        """Field of zeros on physical nodes, ghosts left unclosed (NaN)."""
        u = np.full(self.field_shape, np.nan)
        u[self.physical] = 0.0
        return u

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(x)`` / ``fn(x, y)`` at every padded node, ghosts included."""
        return np.asarray(fn(*self.coords), dtype=float) * np.ones(self.field_shape)

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(self.weights[self.physical] * f[self.physical]))

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return self.integrate(f * g)

    def norm_sq(self, f: np.ndarray) -> float:
        return self.integrate(f * f)

    def boundary_integrate(self, values: Dict[str, np.ndarray], segments=None) -> float:
        total = 0.0
        for name, seg in self.segments.items():
            if segments is not None and name not in segments:
                continue
            if name in values:
                total += float(np.sum(seg.weights * values[name]))
        return total

    def nodes_of(self, fn) -> np.ndarray:
        """Coordinates of the nodes where the boolean mask ``fn(classification)`` holds."""
        mask = fn(self.classification)
        return np.stack([c[mask] for c in self.coords], axis=-1)

    def same_as(self, other: "Mesh") -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing)


def _trapezoid_1d(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


def build_mesh(spec: DomainSpec, resolution, configuration: Optional[str] = None) -> Mesh:
    """Uniform mesh with ``resolution`` nodes per axis (int or per-axis tuple)."""
    res = tuple(int(r) for r in np.atleast_1d(resolution))
    if len(res) == 1 and spec.dim == 2:
        res = res * 2
    if len(res) != spec.dim:
        raise GeometryError(f"resolution {resolution} does not match a {spec.dim}D domain")
    if min(res) < 5:
        raise GeometryError("resolution must be at least 5 nodes per axis")
    if configuration is not None:
        spec.check_configuration(configuration)
    else:
        spec.configuration()

    g = GHOSTS
    spacing = tuple(L / (n - 1) for L, n in zip(spec.extents, res))
    axes = [h * (np.arange(n + 2 * g) - g) for n, h in zip(res, spacing)]

    if spec.dim == 1:
        (nx,), (hx,) = res, spacing
        coords = (axes[0],)
        cls = np.full(nx + 2 * g, GHOST2, dtype=int)
        cls[g - 1] = cls[g + nx] = GHOST1
        cls[g:g + nx] = INTERIOR
        cls[g] = cls[g + nx - 1] = BOUNDARY
        weights = np.zeros(nx + 2 * g)
        weights[g:g + nx] = _trapezoid_1d(nx, hx)
        segs = {}
        for name, b, s in (("left", g, -1), ("right", g + nx - 1, +1)):
            idx = lambda k, b=b, s=s: (np.array([b + s * k]),)
            segs[name] = Segment(
                name=name, role=spec.partition[name],
                normal=np.array([[float(s)]]), tangent=np.zeros((1, 1)), spacing=hx,
                nodes=idx(0), inward=(idx(-1), idx(-2)), ghost=(idx(1), idx(2)),
                weights=np.ones(1),
                line=idx(0), line_inward=(idx(-1), idx(-2)), line_ghost=(idx(1), idx(2)),
            )
        return Mesh(spec, res, spacing, coords, cls, weights, segs)

    nx, ny = res
    hx, hy = spacing
    X, Y = np.meshgrid(axes[0], axes[1])
    cls = np.full((ny + 2 * g, nx + 2 * g), GHOST2, dtype=int)
    cls[g - 1:g + ny + 1, g - 1:g + nx + 1] = GHOST1
    cls[g:g + ny, g:g + nx] = BOUNDARY
    cls[g + 1:g + ny - 1, g + 1:g + nx - 1] = INTERIOR
    for j in (g, g + ny - 1):
        for i in (g, g + nx - 1):
            cls[j, i] = CORNER
    weights = np.zeros_like(X)
    weights[g:g + ny, g:g + nx] = np.outer(_trapezoid_1d(ny, hy), _trapezoid_1d(nx, hx))

    segs = {}
    jr = np.arange(g, g + ny)
    ir = np.arange(g, g + nx)
    # (name, fixed index, sign, axis along which the edge runs)
    for name, fixed, s, along in (
        ("left", g, -1, "y"), ("right", g + nx - 1, +1, "y"),
        ("bottom", g, -1, "x"), ("top", g + ny - 1, +1, "x"),
    ):
        if along == "y":
            run, hn, ht = jr, hx, hy
            make = lambda k, r, fixed=fixed, s=s: (r, np.full(len(r), fixed + s * k))
            normal = np.array([float(s), 0.0])
        else:
            run, hn, ht = ir, hy, hx
            make = lambda k, r, fixed=fixed, s=s: (np.full(len(r), fixed + s * k), r)
            normal = np.array([0.0, float(s)])
        inner_run = run[1:-1]
        n_edge = len(inner_run)
        tangent = np.array([-normal[1], normal[0]])
        segs[name] = Segment(
            name=name, role=spec.partition[name],
            normal=np.tile(normal, (n_edge, 1)), tangent=np.tile(tangent, (n_edge, 1)),
            spacing=hn,
            nodes=make(0, inner_run), inward=(make(-1, inner_run), make(-2, inner_run)),
            ghost=(make(1, inner_run), make(2, inner_run)),
            weights=np.full(n_edge, ht),
            line=make(0, run), line_inward=(make(-1, run), make(-2, run)),
            line_ghost=(make(1, run), make(2, run)),
            tangential_spacing=ht,
        )
    return Mesh(spec, res, spacing, (X, Y), cls, weights, segs)


@dataclass(frozen=True)
class StarShapedReport:
    min_over_boundary: float
    satisfied: bool
    argmin: Tuple[float, ...]


def check_star_shaped(spec: DomainSpec, x0, resolution: int = 65) -> StarShapedReport:
    """Minimum of ``(x - x0) . nu`` over the boundary nodes of ``spec``.

    On straight edges the quantity is affine along each edge, so the extreme
    values sit at edge endpoints; the sampled nodes include those.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != spec.dim or not np.all(np.isfinite(x0)):
        raise GeometryError("anchor must be a finite point of the domain's dimension")
    if spec.dim == 1:
        (L,) = spec.extents
        pts = np.array([[0.0], [L]])
        normals = np.array([[-1.0], [1.0]])
    else:
        lx, ly = spec.extents
        t = np.linspace(0.0, 1.0, resolution)
        edges = [
            (np.stack([np.zeros_like(t), ly * t], 1), (-1.0, 0.0)),
            (np.stack([np.full_like(t, lx), ly * t], 1), (1.0, 0.0)),
            (np.stack([lx * t, np.zeros_like(t)], 1), (0.0, -1.0)),
            (np.stack([lx * t, np.full_like(t, ly)], 1), (0.0, 1.0)),
        ]
        pts = np.concatenate([p for p, _ in edges])
        normals = np.concatenate([np.tile(n, (len(p), 1)) for p, n in edges])
    hn = np.sum((pts - x0) * normals, axis=1)
    k = int(np.argmin(hn))
    value = float(hn[k])
    return StarShapedReport(value, value >= 0.0, tuple(pts[k]))


@dataclass(frozen=True, eq=False)
class FluxField:
    anchor: np.ndarray
    values: Tuple[np.ndarray, ...]  # one padded array per component

    def on_segment(self, seg: Segment, which: str = "nodes") -> np.ndarray:
        idx = getattr(seg, which)
        return np.stack([c[idx] for c in self.values], axis=-1)

    def dot_normal(self, seg: Segment) -> np.ndarray:
        return np.sum(self.on_segment(seg) * seg.normal, axis=-1)

    def dot_tangent(self, seg: Segment) -> np.ndarray:
        return np.sum(self.on_segment(seg) * seg.tangent, axis=-1)


def flux_field(mesh: Mesh, x0) -> FluxField:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != mesh.dim:
        raise GeometryError("anchor dimension does not match the mesh")
    return FluxField(x0, tuple(c - a for c, a in zip(mesh.coords, x0)))
