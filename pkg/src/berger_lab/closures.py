"""Ghost-point closures and the sparse operators they induce.

A closure maps the vector of unknown nodal values ``x`` and the vector of
boundary feedback values ``d`` to a fully padded field.  Under HD the
feedback is the bending moment ``D(d_nu u_t)`` at each non-corner boundary
node; under FCD it is the septic shear force at the free end.  The maps are
affine, so the stepper's matrices are assembled by probing the closure
with unit vectors (batched over leading axes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import CLAMPED, FREE_DAMPED, GHOSTS, HINGED_DAMPED, Mesh
from .operators import PhysicsParams, biharmonic, laplacian, normal_derivative_trace


class Closure:
    def __init__(self, mesh: Mesh, configuration: str, mu1: float = 0.0):
        mesh.spec.check_configuration(configuration)
        self.mesh = mesh
        self.configuration = configuration
        self.mu1 = float(mu1)
        mask = np.zeros(mesh.field_shape, dtype=bool)
        if configuration == "HD":
            mask[mesh.interior] = True
            self.feedback_segments = list(mesh.segments.values())
        else:
            mask[mesh.physical] = True
            for seg in mesh.segments.values():
                if seg.role == CLAMPED:
                    mask[seg.nodes] = False
            self.feedback_segments = [s for s in mesh.segments.values() if s.role == FREE_DAMPED]
        self.unknown_mask = mask
        self.unknown_flat = np.flatnonzero(mask.ravel())
        self.n = len(self.unknown_flat)
        sizes = [s.size for s in self.feedback_segments]
        self.feedback_slices = {}
        start = 0
        for seg, k in zip(self.feedback_segments, sizes):
            self.feedback_slices[seg.name] = slice(start, start + k)
            start += k
        self.n_feedback = start

    # -- field <-> vector -------------------------------------------------
    def scatter(self, x: np.ndarray) -> np.ndarray:
        """Place unknowns into a padded field (batched); other nodes are zero."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        u = np.zeros(lead + (int(np.prod(self.mesh.field_shape)),))
        u[..., self.unknown_flat] = x
        return u.reshape(lead + self.mesh.field_shape)

    def gather(self, u: np.ndarray) -> np.ndarray:
        lead = u.shape[: u.ndim - self.mesh.dim]
        return u.reshape(lead + (-1,))[..., self.unknown_flat]

    # -- closure ------------------------------------------------------------
    def close(self, u: np.ndarray, d=None) -> np.ndarray:
        """Overwrite constrained boundary values and all ghost layers of ``u`` in place.

        ``d`` is the boundary feedback vector (zeros when omitted).
        """
        mesh = self.mesh
        e = (Ellipsis,)
        lead = u.shape[: u.ndim - mesh.dim]
        if d is None:
            d = np.zeros(lead + (self.n_feedback,))
        d = np.asarray(d, dtype=float)
        for seg in mesh.segments.values():
            if seg.role in (HINGED_DAMPED, CLAMPED):
                u[e + seg.line] = 0.0
        for seg in mesh.segments.values():
            h = seg.spacing
            if seg.role == HINGED_DAMPED:
                line = np.zeros(lead + (len(seg.line[0]),))
                if seg.name in self.feedback_slices:
                    # corner positions of the line carry zero moment
                    if mesh.dim == 2:
                        line[..., 1:-1] = d[..., self.feedback_slices[seg.name]]
                    else:
                        line[...] = d[..., self.feedback_slices[seg.name]]
                u[e + seg.line_ghost[0]] = -u[e + seg.line_inward[0]] - h**2 * line
                u[e + seg.line_ghost[1]] = -u[e + seg.line_inward[1]] - 4.0 * h**2 * line
            elif seg.role == CLAMPED:
                u[e + seg.line_ghost[0]] = u[e + seg.line_inward[0]]
                u[e + seg.line_ghost[1]] = u[e + seg.line_inward[1]]
            else:  # free-damped end of the beam
                shear = d[..., self.feedback_slices[seg.name]]
                ub = u[e + seg.line]
                i1, i2 = u[e + seg.line_inward[0]], u[e + seg.line_inward[1]]
                g1 = 2.0 * ub - i1
                u[e + seg.line_ghost[0]] = g1
                u[e + seg.line_ghost[1]] = i2 - 2.0 * i1 + 2.0 * g1 + 2.0 * h**3 * (self.mu1 * ub + shear)
        if mesh.dim == 2:
            self._fill_corner_blocks(u)
        return u

    def _fill_corner_blocks(self, u: np.ndarray):
        g = GHOSTS
        nx, ny = self.mesh.shape
        for jc, sy in ((g, -1), (g + ny - 1, 1)):
            for ic, sx in ((g, -1), (g + nx - 1, 1)):
                for b in (1, 2):
                    for a in (1, 2):
                        u[..., jc + sy * b, ic + sx * a] = u[..., jc - sy * b, ic - sx * a]

    def field(self, x: np.ndarray, d=None) -> np.ndarray:
        return self.close(self.scatter(x), d)

    def trace(self, v: np.ndarray) -> np.ndarray:
        """Boundary argument of the feedback law: d_nu v (HD) or v at the free end (FCD)."""
        parts = []
        for seg in self.feedback_segments:
            if self.configuration == "HD":
                parts.append(normal_derivative_trace(self.mesh, v, seg))
            else:
                parts.append(v[(Ellipsis,) + seg.nodes])
        if not parts:
            lead = v.shape[: v.ndim - self.mesh.dim]
            return np.zeros(lead + (0,))
        return np.concatenate(parts, axis=-1)

    def split(self, values: np.ndarray) -> dict:
        return {name: values[..., sl] for name, sl in self.feedback_slices.items()}


def _probe(fn, n_in: int, field_size: int, budget: float = 2e6) -> sp.csr_matrix:
    """Assemble the sparse matrix of a linear map by batched unit-vector probing."""
    chunk = max(1, int(budget // max(field_size, 1)))
    blocks = []
    for start in range(0, n_in, chunk):
        stop = min(n_in, start + chunk)
        eye = np.zeros((stop - start, n_in))
        eye[np.arange(stop - start), np.arange(start, stop)] = 1.0
        out = fn(eye)  # (batch, n_out)
        out[np.abs(out) < 1e-300] = 0.0
        blocks.append(sp.csr_matrix(out.T))
    return sp.hstack(blocks).tocsr() if blocks else sp.csr_matrix((0, n_in))


REACH = 4  # max grid distance between a nodal input and any output it influences


def _probe_colored(fn, in_pos: np.ndarray, out_pos: np.ndarray, reach: int = REACH) -> sp.csr_matrix:
    """Compressed probing for maps of bounded reach (Curtis-Powell-Reid colouring).

    Inputs whose grid positions agree modulo ``2 reach + 1`` on every axis
    share a probe; each output then sees at most one input of that colour.
    """
    period = 2 * reach + 1
    n_in, n_out = len(in_pos), len(out_pos)
    colors = np.mod(in_pos, period)
    keys = np.ravel_multi_index(colors.T, (period,) * in_pos.shape[1])
    lookup = {tuple(q): k for k, q in enumerate(in_pos)}
    groups = [np.flatnonzero(keys == c) for c in np.unique(keys)]
    probes = np.zeros((len(groups), n_in))
    for g, members in enumerate(groups):
        probes[g, members] = 1.0
    out = fn(probes)
    rows, cols, vals = [], [], []
    for g, members in enumerate(groups):
        color = colors[members[0]]
        nz = np.flatnonzero(np.abs(out[g]) > 1e-300)
        offset = np.mod(color - out_pos[nz], period)
        offset = np.where(offset > reach, offset - period, offset)
        src = out_pos[nz] + offset
        for r, q, val in zip(nz, map(tuple, src), out[g, nz]):
            k = lookup.get(q)
            if k is None:
                raise RuntimeError("probe response outside the assumed stencil reach")
            rows.append(r)
            cols.append(k)
            vals.append(val)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


@dataclass
class LinearOperators:
    closure: Closure
    K0: sp.csr_matrix  # biharmonic of the closed unknowns, zero feedback
    Kd: sp.csr_matrix  # biharmonic response to unit feedback values
    L: sp.csr_matrix  # Laplacian at unknown nodes
    S: sp.csr_matrix  # feedback argument from unknown velocities
    mass: np.ndarray  # trapezoid weights of unknown nodes


def _build_operators(mesh: Mesh, configuration: str, mu1: float) -> LinearOperators:
    cl = Closure(mesh, configuration, mu1)
    n, nd = cl.n, cl.n_feedback

    def bih_x(X):
        return cl.gather(biharmonic(mesh, cl.field(X)))

    def bih_d(Dm):
        u = np.zeros((Dm.shape[0],) + mesh.field_shape)
        return cl.gather(biharmonic(mesh, cl.close(u, Dm)))

    def lap_x(X):
        return cl.gather(laplacian(mesh, cl.field(X), require="none"))

    def trace_x(X):
        return cl.trace(cl.field(X))

    grid = np.indices(mesh.field_shape).reshape(mesh.dim, -1).T
    unknown_pos = grid[cl.unknown_flat]
    feedback_pos = _feedback_positions(cl)
    K0 = _probe_colored(bih_x, unknown_pos, unknown_pos)
    Kd = _probe_colored(bih_d, feedback_pos, unknown_pos) if nd else sp.csr_matrix((n, 0))
    L = _probe_colored(lap_x, unknown_pos, unknown_pos)
    S = _probe_colored(trace_x, unknown_pos, feedback_pos) if nd else sp.csr_matrix((0, n))
    mass = mesh.weights.ravel()[cl.unknown_flat]
    return LinearOperators(cl, K0, Kd, L, S, mass)


def _feedback_positions(cl: Closure) -> np.ndarray:
    parts = [np.stack(np.broadcast_arrays(*seg.nodes), axis=-1).reshape(-1, cl.mesh.dim)
             for seg in cl.feedback_segments]
    return np.concatenate(parts) if parts else np.zeros((0, cl.mesh.dim), dtype=int)


_cache = {}


def linear_operators(mesh: Mesh, configuration: str, params: PhysicsParams) -> LinearOperators:
    key = (id(mesh), configuration, float(params.mu1))
    hit = _cache.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    ops = _build_operators(mesh, configuration, params.mu1)
    if len(_cache) > 32:
        _cache.clear()
    _cache[key] = (mesh, ops)
    return ops


def inverse_iteration(K: sp.spmatrix, tol: float = 1e-8, max_iter: int = 20000, seed: int = 0) -> float:
    """Smallest-magnitude eigenvalue of ``K`` by inverse power iteration."""
    lu = spla.splu(sp.csc_matrix(K))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(K.shape[0])
    x /= np.linalg.norm(x)
    lam = np.inf
    for _ in range(max_iter):
        y = lu.solve(x)
        # Rayleigh-type estimate for a possibly non-symmetric operator
        new = float(np.dot(x, x) / np.dot(x, y))
        y /= np.linalg.norm(y)
        x = y
        if np.isfinite(lam) and abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    raise RuntimeError(f"inverse iteration did not converge in {max_iter} steps (last estimate {lam})")
