"""Boundary damping laws and sampled checks of the slope assumption.

A law D is monotone, D(0) = 0, and has slopes bounded between
``slope_min`` (m) and ``slope_max`` (M) away from the origin.  The checks
run on a uniform grid; they cannot prove the assumption, only expose
violations on the sampled range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np


@dataclass(frozen=True, eq=False)
class DampingLaw:
    name: str
    value_fn: Callable[[np.ndarray], np.ndarray]
    deriv_fn: Callable[[np.ndarray], np.ndarray]
    slope_min: float
    slope_max: float
    params: Dict[str, float] = field(default_factory=dict)

    def __call__(self, s):
        return self.value_fn(np.asarray(s, dtype=float))

    def derivative(self, s):
        return self.deriv_fn(np.asarray(s, dtype=float))

    @property
    def linear_part(self) -> float:
        """Slope at the origin, treated implicitly by the stepper."""
        return float(self.derivative(0.0))

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def describe(self) -> dict:
        return {"name": self.name, **self.params}


def evaluate_damping(law: DampingLaw, s: float):
    if not np.isfinite(s):
        raise ValueError("damping argument must be finite")
    return float(law(s)), float(law.derivative(s))


def linear(k: float = 1.0) -> DampingLaw:
    if k <= 0:
        raise ValueError("linear damping needs k > 0")
    return DampingLaw("linear", lambda s: k * s, lambda s: np.full_like(s, k, dtype=float),
                      k, k, {"k": k})


def saturating(amplitude: float = 0.5) -> DampingLaw:
    """D(s) = s + a sin(s); slopes in [1 - a, 1 + a]."""
    if not 0 <= amplitude < 1:
        raise ValueError("saturating law needs 0 <= amplitude < 1")
    a = amplitude
    return DampingLaw("saturating", lambda s: s + a * np.sin(s), lambda s: 1.0 + a * np.cos(s),
                      1.0 - a, 1.0 + a, {"amplitude": a})


def piecewise_linear(m: float = 1.0, inner_slope: float = 3.0) -> DampingLaw:
    """Slope ``inner_slope`` on [-1, 1] and ``m`` outside, continuous at |s| = 1.

    The kink makes D only Lipschitz; the derivative is taken one-sided.
    """
    if not (0 < m and inner_slope > 0):
        raise ValueError("slopes must be positive")

    def value(s):
        return np.where(np.abs(s) <= 1.0, inner_slope * s,
                        np.sign(s) * (inner_slope + m * (np.abs(s) - 1.0)))

    def deriv(s):
        return np.where(np.abs(s) <= 1.0, inner_slope, m) * np.ones_like(s, dtype=float)

    return DampingLaw("piecewise", value, deriv, m, max(m, inner_slope),
                      {"m": m, "inner_slope": inner_slope})


def cubic(declared_max: float = 1000.0) -> DampingLaw:
    """D(s) = s^3 declared with a finite upper slope: a designed counterexample.

    The default bound is exceeded for |s| > 18.3 while the growth check, which
    needs D(s) <= M s, still holds on [-20, 20]; only the slope check trips.
    """
    return DampingLaw("cubic", lambda s: s**3, lambda s: 3.0 * s**2, 1.0, declared_max,
                      {"declared_max": declared_max})


def arctan(declared_min: float = 0.1) -> DampingLaw:
    """D(s) = arctan(s) declared with a positive lower slope: a designed counterexample."""
    return DampingLaw("arctan", np.arctan, lambda s: 1.0 / (1.0 + s**2), declared_min, 1.0,
                      {"declared_min": declared_min})


def zero() -> DampingLaw:
    """D = 0, for conservative oracle runs; does not satisfy the slope assumption."""
    return DampingLaw("zero", lambda s: np.zeros_like(s, dtype=float),
                      lambda s: np.zeros_like(s, dtype=float), 0.0, 0.0, {})


LAWS = {
    "linear": linear,
    "saturating": saturating,
    "piecewise": piecewise_linear,
    "cubic": cubic,
    "arctan": arctan,
    "zero": zero,
}

SHIPPED = ("linear", "saturating", "piecewise")


def make_law(name: str, **params) -> DampingLaw:
    try:
        factory = LAWS[name]
    except KeyError:
        raise ValueError(f"unknown damping law {name!r}") from None
    return factory(**params)


@dataclass
class AssumptionReport:
    passed: bool
    violations: List[dict]
    failed_checks: List[str]


CHECKS = ("slope_bounds", "coercivity", "growth", "monotone")


def verify_damping_assumption(law: DampingLaw, sample_range: float = 20.0,
                              samples: int = 10_000, rtol: float = 1e-12) -> AssumptionReport:
    """Sampled check of the slope assumption and its consequences.

    slope_bounds: m <= D'(s) <= M for |s| >= 1
    coercivity:   D(s) s >= (m/2) s^2 for |s| >= 2
    growth:       D(s)^2 <= D(s) s * max(sup_{|xi|<=1} D'(xi), M)
    monotone:     D nondecreasing on the grid
    """
    if sample_range < 4 or samples < 100:
        raise ValueError("need sample_range >= 4 and samples >= 100")
    s = np.linspace(-sample_range, sample_range, samples)
    d = law(s)
    dp = law.derivative(s)
    m, M = law.slope_min, law.slope_max
    violations = []

    def note(check, mask, lhs, rhs, side=None):
        for k in np.flatnonzero(mask)[:5]:
            entry = {"check": check, "s": float(s[k]), "lhs": float(lhs[k]), "rhs": float(rhs[k])}
            if side is not None:
                entry["side"] = str(side[k])
            violations.append(entry)
        return bool(mask.any())

    failed = []
    if not (0 < m <= M < np.inf):
        violations.append({"check": "slope_bounds", "declared": [m, M]})
        failed.append("slope_bounds")
    outer = np.abs(s) >= 1.0
    tol = rtol * np.maximum(1.0, np.abs(dp))
    low, high = outer & (dp < m - tol), outer & (dp > M + tol)
    side = np.where(low, "lower", "upper")
    if note("slope_bounds", low | high, dp, np.where(low, m, M), side) and "slope_bounds" not in failed:
        failed.append("slope_bounds")

    far = np.abs(s) >= 2.0
    lhs, rhs = d * s, 0.5 * m * s**2
    if note("coercivity", far & (lhs < rhs - rtol * np.abs(rhs)), lhs, rhs):
        failed.append("coercivity")

    inner = np.linspace(-1.0, 1.0, max(samples // 10, 101))
    c = max(float(np.max(law.derivative(inner))), M)
    lhs, rhs = d**2, d * s * c
    if note("growth", lhs > rhs + rtol * np.maximum(1.0, np.abs(rhs)), lhs, rhs):
        failed.append("growth")

    steps = np.diff(d)
    if note("monotone", np.concatenate([steps < -rtol * np.maximum(1.0, np.abs(d[1:])), [False]]),
            d, np.roll(d, -1)):
        failed.append("monotone")
    return AssumptionReport(not failed, violations, failed)


def damping_bound_constants(law: DampingLaw, sample_range: float = 20.0, samples: int = 10_000):
    """(C0, C1) with D(s)^2 + s^2 <= C0 + C1 D(s) s on the grid, C1 = max(2/m, sup D', M)."""
    s = np.linspace(-sample_range, sample_range, samples)
    inner = np.linspace(-1.0, 1.0, 1001)
    c1 = max(2.0 / law.slope_min, float(np.max(law.derivative(inner))), law.slope_max)
    d = law(s)
    c0 = max(0.0, float(np.max(d**2 + s**2 - c1 * d * s)))
    return c0, c1


def septic_boundary_damping(v):
    """|v|^6 v, the free-end feedback."""
    v = np.asarray(v, dtype=float)
    return np.abs(v) ** 6 * v


def septic_derivative(v):
    v = np.asarray(v, dtype=float)
    return 7.0 * v**6
