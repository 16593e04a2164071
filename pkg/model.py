"""
Double-well confinement with quadratic attraction: potentials, drift fields,
the N-particle energy, analytic potential bounds and the WJ constants.

V(x) = |x|^4 - a|x|^2,  W(u) = -|u|^2,  b(x, y) = -grad V(x) - eps grad W(x - y).

Positions are arrays whose last axis is the space dimension d; leading axes
are broadcast (single point, N particles, or a batch of replicas).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy.optimize import bisect

from errors import InvalidMeasureError, RegimeError

logger = logging.getLogger(__name__)

# Upper end of the R_a bracket and bisection tolerance.
R_BRACKET_MAX = 10.0
R_TOLERANCE = 1e-10
MASS_TOLERANCE = 1e-10


class Measure(Protocol):
    """Anything with unit mass and the first two moments (GridDensity, DiscreteMeasure)."""

    def total_mass(self) -> float: ...

    def mean(self) -> np.ndarray: ...

    def second_moment(self) -> float: ...


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters: well depth a, interaction strength eps, dimension dim."""

    a: float
    eps: float
    dim: int = 1

    def __post_init__(self):
        if not self.a > 0:
            raise RegimeError(f"well depth a must be positive, got {self.a}")
        if not self.eps >= 0:
            raise RegimeError(f"interaction strength eps must be nonnegative, got {self.eps}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise RegimeError(f"dimension must be a positive integer, got {self.dim}")

    @property
    def admissible(self) -> bool:
        """True when (a, eps) lies in the regime where the WJ constants are positive."""
        try:
            return wj_constants(self.a, self.eps, self.dim).feasible
        except RegimeError:
            return False

    def with_eps(self, eps: float) -> "ModelParams":
        return ModelParams(a=self.a, eps=eps, dim=self.dim)


@dataclass(frozen=True)
class WjConstants:
    r_a: float
    c1: float
    c2: float
    kappa_a: float
    eps_a: float
    kappa: float
    feasible: bool


@dataclass(frozen=True)
class PotentialBounds:
    """Analytic bounds on V, W: one-sided Lipschitz constant, convexity outside B_R, sup |V_eps| on B_3R."""

    one_sided: float
    convex_outside: float
    sup_v_eps: float
    convex_ok: bool


def potential_V(x, params: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return r2 * r2 - params.a * r2


def grad_V(x, params: ModelParams) -> np.ndarray:
    """Return (4|x|^2 - 2a) x."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    return (4.0 * r2 - 2.0 * params.a) * x


def potential_W(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return -np.sum(u * u, axis=-1)


def grad_W(u) -> np.ndarray:
    return -2.0 * np.asarray(u, dtype=float)


def pair_drift(x, y, params: ModelParams) -> np.ndarray:
    """b(x, y) = -grad V(x) + 2 eps (x - y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -grad_V(x, params) - params.eps * grad_W(x - y)


def _checked_mean(mu: Measure) -> np.ndarray:
    mass = mu.total_mass()
    if not abs(mass - 1.0) <= MASS_TOLERANCE:
        raise InvalidMeasureError(f"measure must have unit mass, got {mass!r}")
    m1 = np.atleast_1d(np.asarray(mu.mean(), dtype=float))
    if not np.all(np.isfinite(m1)):
        raise InvalidMeasureError("measure has no finite first moment")
    return m1


def mean_field_drift(x, mu: Measure, params: ModelParams) -> np.ndarray:
    """
    Convolution b*mu(x) = int b(x, z) mu(dz).

    For quadratic W the integral only sees the mean of mu:
    b*mu(x) = -grad V(x) + 2 eps (x - m1(mu)).
    """
    m1 = _checked_mean(mu)
    x = np.asarray(x, dtype=float)
    return -grad_V(x, params) + 2.0 * params.eps * (x - m1)


def v_eps(x, mu: Measure, params: ModelParams) -> np.ndarray:
    """Effective potential V + eps W*mu = V(x) - eps (|x|^2 - 2 x.m1 + m2)."""
    m1 = _checked_mean(mu)
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return potential_V(x, params) - params.eps * (r2 - 2.0 * (x @ m1) + mu.second_moment())


def system_drift(x, params: ModelParams) -> np.ndarray:
    """
    N-particle field b^N: component i is (1/N) sum_j b(x_i, x_j), self term included.

    Args:
        x: positions of shape (..., N, d)

    Returns:
        Array of the same shape.
    """
    x = np.asarray(x, dtype=float)
    centre = x.mean(axis=-2, keepdims=True)
    return -grad_V(x, params) + 2.0 * params.eps * (x - centre)


def system_energy(x, params: ModelParams) -> np.ndarray:
    """
    sum_i V(x_i) + eps/(2N) sum_{i,j} W(x_i - x_j), whose negative gradient is system_drift.

    The double sum uses sum_{i,j}|x_i - x_j|^2 = 2N sum_i |x_i|^2 - 2|sum_i x_i|^2.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-2]
    confinement = np.sum(potential_V(x, params), axis=-1)
    sq = np.sum(x * x, axis=(-2, -1))
    total = np.sum(x, axis=-2)
    interaction = -params.eps * (sq - np.sum(total * total, axis=-1) / n)
    return confinement + interaction


def one_sided_lipschitz(params: ModelParams) -> float:
    """
    Constant L with <b^N(y) - b^N(x), y - x> <= L |y - x|^2.

    2a from the confinement, plus 2 eps from the attraction (the centre-of-mass
    correction only lowers it).
    """
    return 2.0 * params.a + 2.0 * params.eps


def lemma41_bounds(R: float, m2: float, params: ModelParams) -> PotentialBounds:
    """
    Computable bounds on the potentials.

    Args:
        R: radius; the convexity bound is meaningful only for R > sqrt(a/6)
        m2: bound on the second moment of the measure entering V_eps

    Returns:
        PotentialBounds with one_sided = 2a, convex_outside = 4(R^2 - a/6) and
        sup_v_eps = (3R)^4 + (a + 2eps)(3R)^2 + 2 eps m2.
    """
    a, eps = params.a, params.eps
    convex_outside = 4.0 * (R * R - a / 6.0)
    three_r2 = (3.0 * R) ** 2
    sup_v_eps = three_r2 * three_r2 + (a + 2.0 * eps) * three_r2 + 2.0 * eps * m2
    convex_ok = convex_outside > 0
    if not convex_ok:
        logger.warning(f"R={R:.6g} <= sqrt(a/6)={math.sqrt(a / 6):.6g}: convexity bound is nonpositive")
    return PotentialBounds(
        one_sided=2.0 * a,
        convex_outside=convex_outside,
        sup_v_eps=sup_v_eps,
        convex_ok=convex_ok,
    )


def stationary_moment_bound(params: ModelParams) -> float:
    """Second-moment bound sqrt((a + eps)^2 + d) for a stationary solution."""
    return math.sqrt((params.a + params.eps) ** 2 + params.dim)


def moment_envelope(m2_0: float, t, delta: float, params: ModelParams):
    """Moment envelope e^{-4 delta t} m2(0) + ((a + eps + delta)^2 + d) / (4 delta)."""
    t = np.asarray(t, dtype=float)
    plateau = ((params.a + params.eps + delta) ** 2 + params.dim) / (4.0 * delta)
    return np.exp(-4.0 * delta * t) * m2_0 + plateau


def _radius_condition(R: float, a: float) -> float:
    return R * R - a / 6.0 - 1.0 / (36.0 * R * R) - a


def radius_r_a(a: float) -> float:
    """R_a = inf{R > 0 : R^2 - a/6 > (36 R^2)^{-1} + a}, by bisection on [sqrt(a/6), 10]."""
    lo = math.sqrt(a / 6.0)
    if _radius_condition(R_BRACKET_MAX, a) <= 0:
        raise RegimeError(f"R_a is not bracketed by [{lo:.4g}, {R_BRACKET_MAX}] for a={a}")
    return bisect(_radius_condition, lo, R_BRACKET_MAX, args=(a,), xtol=R_TOLERANCE)


def wj_constants(a: float, eps: float, dim: int = 1) -> WjConstants:
    """
    Constants of the WJ inequality for the double-well model.

    sup_{|z|<=3R}|V_eps| is replaced by its explicit bound from lemma41_bounds,
    with the stationary second-moment bound sqrt((a + eps)^2 + d).

    Raises:
        RegimeError: if eps >= a/2
    """
    if eps >= a / 2.0:
        raise RegimeError(f"eps={eps} must be below a/2={a / 2}")
    params = ModelParams(a=a, eps=eps, dim=dim)
    r_a = radius_r_a(a)
    m2 = stationary_moment_bound(params)
    sup_v = lemma41_bounds(r_a, m2, params).sup_v_eps
    # (36 R^2 e^{2 sup})^{-1} evaluated in log space; underflows to 0 for deep wells
    c1 = math.exp(-2.0 * sup_v - math.log(36.0 * r_a * r_a)) - 2.0 * a
    c2 = 4.0 * (r_a * r_a - a / 6.0) - 1.0 / (9.0 * r_a * r_a)
    kappa_a = min(4.0 * a, c1)
    eps_a = min(kappa_a / 4.0, a / 2.0)
    kappa = kappa_a - 4.0 * eps
    feasible = kappa > 0 and eps < eps_a
    return WjConstants(
        r_a=r_a, c1=c1, c2=c2, kappa_a=kappa_a, eps_a=eps_a, kappa=kappa, feasible=feasible
    )


def a_star_frontier(eps: float = 0.0, dim: int = 1, a_min: float = 1e-6, a_max: float = 1.0) -> Optional[float]:
    """
    Largest well depth with positive kappa_a, located by bisection on C1(R_a, a, eps) = 0.

    Only a > 2 eps is searched (the constants are undefined below).
    Returns None when [a_min, a_max] does not bracket the frontier.
    """
    a_min = max(a_min, 2.0 * eps * (1.0 + 1e-9) + 1e-12)

    def margin(a: float) -> float:
        return wj_constants(a, eps, dim).c1

    lo_val, hi_val = margin(a_min), margin(a_max)
    if lo_val <= 0 or hi_val > 0:
        logger.warning(f"a* not bracketed on [{a_min:.3g}, {a_max:.3g}] (C1 = {lo_val:.3g}, {hi_val:.3g})")
        return None
    return bisect(margin, a_min, a_max, xtol=1e-12, rtol=1e-10)
