"""Finite-difference operators on padded fields.

All stencils are second-order and centred; boundary traces use one-sided
second-order differences.  Functions accept arbitrary leading batch axes,
which the matrix assembly in :mod:`berger_lab.closures` relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import FREE_DAMPED, INTERIOR, Mesh, Segment


class UnclosedGhostError(ValueError):
    """Raised when a stencil reaches ghost values that were never closed."""


@dataclass(frozen=True, eq=False)
class PhysicsParams:
    gamma: float = 0.0
    p: Optional[np.ndarray] = None
    mu: float = 1.0
    mu1: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.mu <= 1:
            raise ValueError("Poisson modulus mu must lie in (0, 1]")
        if not self.mu1 >= 0:
            raise ValueError("boundary stiffness mu1 must be non-negative")

    def load(self, mesh: Mesh) -> np.ndarray:
        if self.p is None:
            return np.zeros(mesh.field_shape)
        if self.p.shape != mesh.field_shape:
            raise ValueError("load field does not match the mesh")
        return self.p

    def with_(self, **kw) -> "PhysicsParams":
        return replace(self, **kw)


def _check(mesh: Mesh, *fields):
    for f in fields:
        if f.shape[-mesh.dim:] != mesh.field_shape:
            raise ValueError(f"field of shape {f.shape} does not live on this mesh")


def _second_difference(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full(u.shape, np.nan)
    n = u.shape[axis]
    mid = [slice(None)] * u.ndim
    lo, hi = list(mid), list(mid)
    mid[axis], lo[axis], hi[axis] = slice(1, n - 1), slice(0, n - 2), slice(2, n)
    out[tuple(mid)] = (u[tuple(hi)] - 2.0 * u[tuple(mid)] + u[tuple(lo)]) / h**2
    return out


def _first_difference(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full(u.shape, np.nan)
    n = u.shape[axis]
    mid = [slice(None)] * u.ndim
    lo, hi = list(mid), list(mid)
    mid[axis], lo[axis], hi[axis] = slice(1, n - 1), slice(0, n - 2), slice(2, n)
    out[tuple(mid)] = (u[tuple(hi)] - u[tuple(lo)]) / (2.0 * h)
    return out


def _axes(mesh: Mesh, u: np.ndarray):
    """(array axis, spacing) pairs, x first."""
    if mesh.dim == 1:
        return [(u.ndim - 1, mesh.spacing[0])]
    return [(u.ndim - 1, mesh.spacing[0]), (u.ndim - 2, mesh.spacing[1])]


def laplacian(mesh: Mesh, u: np.ndarray, require: str = "physical") -> np.ndarray:
    """5-point (2D) / 3-point (1D) Laplacian wherever the stencil fits.

    ``require`` names the node set ("physical", "interior" or "none") whose
    result must be finite; NaN there means unclosed ghosts.
    """
    _check(mesh, u)
    out = sum(_second_difference(u, ax, h) for ax, h in _axes(mesh, u))
    _require_finite(mesh, out, require)
    return out


def biharmonic(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Composition of :func:`laplacian` with itself (13-point in 2D)."""
    return laplacian(mesh, laplacian(mesh, u, require="none"), require="interior")


def _require_finite(mesh: Mesh, f: np.ndarray, where: str):
    if where == "none":
        return
    region = mesh.physical if where == "physical" else mesh.interior
    if not np.all(np.isfinite(f[(Ellipsis,) + region])):
        raise UnclosedGhostError(f"stencil reached unclosed ghost values at {where} nodes")


def gradient(mesh: Mesh, u: np.ndarray):
    """Gradient components at physical nodes (NaN elsewhere).

    Centred differences inside, one-sided second-order on the boundary rows.
    """
    _check(mesh, u)
    comps = []
    phys = mesh.physical
    for k, (ax, h) in enumerate(_axes(mesh, u)):
        d = np.full(u.shape, np.nan)
        up = np.full(u.shape, np.nan)
        up[(Ellipsis,) + phys] = u[(Ellipsis,) + phys]
        d_c = _first_difference(up, ax, h)
        d[...] = d_c
        sl = phys[::-1][k] if mesh.dim == 2 else phys[0]
        first, last = sl.start, sl.stop - 1

        def take(i):
            idx = [slice(None)] * u.ndim
            idx[ax] = i
            return tuple(idx)

        d[take(first)] = (-3.0 * up[take(first)] + 4.0 * up[take(first + 1)] - up[take(first + 2)]) / (2 * h)
        d[take(last)] = (3.0 * up[take(last)] - 4.0 * up[take(last - 1)] + up[take(last - 2)]) / (2 * h)
        mask = np.zeros(u.shape[-mesh.dim:], dtype=bool)
        mask[phys] = True
        d[..., ~mask] = np.nan
        comps.append(d)
    return comps


def gradient_norm_sq(mesh: Mesh, u: np.ndarray) -> float:
    """Trapezoid quadrature of |grad u|^2."""
    comps = gradient(mesh, u)
    sq = sum(np.where(np.isfinite(c), c, 0.0) ** 2 for c in comps)
    return mesh.integrate(sq)


def dirichlet_form(mesh: Mesh, u: np.ndarray) -> float:
    """Edge-based discrete Dirichlet energy: sum over mesh edges of (du/h)^2 * cell.

    This is the quadratic form paired with :func:`laplacian` by summation by
    parts; the stepper uses it so the Berger work is an exact discrete
    gradient.  Edges lying on a boundary line get half weight.
    """
    phys = u[mesh.physical]
    total = 0.0
    for k, h in enumerate(mesh.spacing):
        ax = phys.ndim - 1 - k
        diff = np.diff(phys, axis=ax) / h
        w = np.full(diff.shape, mesh.cell_volume)
        if mesh.dim == 2:
            other = phys.ndim - 1 - (1 - k)
            idx0 = [slice(None)] * 2
            idx1 = [slice(None)] * 2
            idx0[other], idx1[other] = 0, -1
            w[tuple(idx0)] *= 0.5
            w[tuple(idx1)] *= 0.5
        total += float(np.sum(w * diff**2))
    return total


def berger_coefficient(mesh: Mesh, u: np.ndarray, params: PhysicsParams) -> float:
    return params.gamma - gradient_norm_sq(mesh, u)


def second_derivatives(mesh: Mesh, u: np.ndarray):
    """(u_xx, u_yy, u_xy) with centred stencils wherever they fit (2D only)."""
    if mesh.dim != 2:
        raise ValueError("second_derivatives needs a 2D mesh")
    hx, hy = mesh.spacing
    uxx = _second_difference(u, u.ndim - 1, hx)
    uyy = _second_difference(u, u.ndim - 2, hy)
    uxy = _first_difference(_first_difference(u, u.ndim - 1, hx), u.ndim - 2, hy)
    return uxx, uyy, uxy


def von_karman_bracket(mesh: Mesh, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """[u, v] = u_xx v_yy + u_yy v_xx - 2 u_xy v_xy at interior nodes.

    Returns zeros on a 1D mesh, where the bracket has no content.
    """
    _check(mesh, u, v)
    if u.shape != v.shape:
        raise ValueError("fields live on different meshes")
    out = np.full(u.shape, np.nan)
    if mesh.dim == 1:
        out[(Ellipsis,) + mesh.interior] = 0.0
        return out
    uxx, uyy, uxy = second_derivatives(mesh, u)
    vxx, vyy, vxy = second_derivatives(mesh, v)
    br = uxx * vyy + uyy * vxx - 2.0 * uxy * vxy
    out[(Ellipsis,) + mesh.interior] = br[(Ellipsis,) + mesh.interior]
    return out


def bilinear_a(mesh: Mesh, u: np.ndarray, v: np.ndarray, params: PhysicsParams) -> float:
    """a(u,v) = int(Lap u Lap v - (1-mu)[u,v]) + mu1 * sum over free-damped segments of u v.

    Ghosts of both fields must be closed so the Laplacian is defined on the
    boundary.  The bracket is integrated over interior nodes only.
    """
    _check(mesh, u, v)
    total = mesh.inner(laplacian(mesh, u), laplacian(mesh, v))
    if params.mu != 1.0:
        br = von_karman_bracket(mesh, u, v)
        w = np.where(mesh.interior_mask, mesh.weights, 0.0)
        total -= (1.0 - params.mu) * float(np.sum(w * np.nan_to_num(br)))
    if params.mu1:
        for seg in mesh.segments.values():
            if seg.role == FREE_DAMPED:
                total += params.mu1 * float(np.sum(seg.weights * u[seg.nodes] * v[seg.nodes]))
    return total


def segment_of(mesh: Mesh, segment) -> Segment:
    if isinstance(segment, Segment):
        return segment
    try:
        return mesh.segments[segment]
    except KeyError:
        raise ValueError(f"segment {segment!r} is not part of this mesh") from None


def normal_derivative_trace(mesh: Mesh, u: np.ndarray, segment) -> np.ndarray:
    """One-sided second-order d/dnu at the segment's (non-corner) nodes."""
    seg = segment_of(mesh, segment)
    e = (Ellipsis,)
    ub = u[e + seg.nodes]
    u1 = u[e + seg.inward[0]]
    u2 = u[e + seg.inward[1]]
    return (3.0 * ub - 4.0 * u1 + u2) / (2.0 * seg.spacing)


def normal_normal_trace(mesh: Mesh, u: np.ndarray, segment) -> np.ndarray:
    """d^2u/dnu^2 at segment nodes, centred across the boundary through the first ghost."""
    seg = segment_of(mesh, segment)
    return (u[seg.ghost[0]] - 2.0 * u[seg.nodes] + u[seg.inward[0]]) / seg.spacing**2


def tangential_derivative(mesh: Mesh, values_on_line: np.ndarray, segment) -> np.ndarray:
    """Centred tangential derivative at non-corner nodes from values along the full edge line."""
    seg = segment_of(mesh, segment)
    if mesh.dim == 1:
        return np.zeros(seg.size)
    ht = seg.tangential_spacing
    d = (values_on_line[2:] - values_on_line[:-2]) / (2.0 * ht)
    # tangent is (-nu_2, nu_1); the edge line runs along +x or +y
    sign = float(np.sum(seg.tangent[0]))
    return sign * d


def smallest_eigenvalue(configuration: str, mesh: Mesh, params: Optional[PhysicsParams] = None,
                        tol: float = 1e-8, max_iter: int = 20000) -> float:
    """Smallest eigenvalue of the discrete biharmonic with homogeneous closure.

    Inverse power iteration on the assembled operator; see
    :func:`berger_lab.closures.linear_operators`.
    """
    from .closures import inverse_iteration, linear_operators

    ops = linear_operators(mesh, configuration, params or PhysicsParams())
    return inverse_iteration(ops.K0, tol=tol, max_iter=max_iter)
