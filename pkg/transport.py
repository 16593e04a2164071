"""
Wasserstein-2 machinery: exact discrete optimal transport, one-dimensional
quantile formulas, monotone (Brenier) maps, the WJ dissipation functional, the
mean-field fluctuation functional and the tensorization / marginal audits.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import ot

from errors import InvalidMeasureError, ProblemSizeError, SupportError, SymmetryError
from limit import GridDensity, sample as sample_density
from model import ModelParams, grad_V, mean_field_drift, pair_drift
from particles import replica_rng

logger = logging.getLogger(__name__)

PLAN_CAP = 1_000_000
WEIGHT_TOLERANCE = 1e-9
DERIVATIVE_FLOOR = 1e-12
SUPPORT_FLOOR = 1e-12
SYMMETRIZE_MAX_BLOCKS = 6
EMD_MAX_ITER = 10_000_000


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud; points have shape (n, D)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if points.shape[0] != weights.shape[0]:
            raise InvalidMeasureError(f"{points.shape[0]} points but {weights.shape[0]} weights")
        if not np.all(np.isfinite(points)):
            raise InvalidMeasureError("points contain NaN or infinite coordinates")
        if np.any(weights < 0):
            raise InvalidMeasureError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise InvalidMeasureError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points=points, weights=np.full(n, 1.0 / n))

    @classmethod
    def from_weights(cls, points, weights) -> "DiscreteMeasure":
        """Normalize arbitrary nonnegative weights."""
        weights = np.asarray(weights, dtype=float)
        return cls(points=points, weights=weights / weights.sum())

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points**2, axis=1))


@dataclass(frozen=True)
class MonotoneMap:
    """Increasing map T = psi' sampled on the support of the source density, with T' = psi''."""

    grid: np.ndarray
    values: np.ndarray
    derivative: np.ndarray
    source_mass: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.values)

    def heat_integrand(self) -> np.ndarray:
        """psi'' + 1/psi'' - 2, nonnegative by AM-GM."""
        return self.derivative + 1.0 / self.derivative - 2.0


@dataclass(frozen=True)
class TransportResult:
    cost: float
    plan: np.ndarray


@dataclass(frozen=True)
class WjValue:
    heat_term: float
    drift_term: float
    j: float
    transport_map: MonotoneMap


@dataclass(frozen=True)
class FluctuationValue:
    mc_estimate: float
    mc_stderr: float
    closed_form: float
    full_form: float
    cross_term: float
    cross_stderr: float
    definitional: float
    definitional_stderr: float


@dataclass(frozen=True)
class AuditValue:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs


OneDimensional = Union[GridDensity, DiscreteMeasure, np.ndarray, Sequence[float]]


# --- one-dimensional quantile transport -------------------------------------------------


def _as_discrete_1d(measure) -> Optional[DiscreteMeasure]:
    if isinstance(measure, GridDensity):
        return None
    if isinstance(measure, DiscreteMeasure):
        if measure.dim != 1:
            raise InvalidMeasureError(f"expected a 1-D measure, got dimension {measure.dim}")
        return measure
    return DiscreteMeasure.uniform(np.sort(np.asarray(measure, dtype=float).ravel()))


def _quantile_parts(measure):
    """(breakpoints in u, quantile function) for a grid density or a 1-D discrete measure."""
    discrete = _as_discrete_1d(measure)
    if discrete is None:
        cdf, edges = measure.cdf_at_edges(), measure.edges
        return cdf, lambda u: np.interp(u, cdf, edges)
    order = np.argsort(discrete.points[:, 0], kind="stable")
    xs = discrete.points[order, 0]
    cw = np.cumsum(discrete.weights[order])
    cw[-1] = 1.0
    return np.concatenate([[0.0], cw]), lambda u: xs[np.clip(np.searchsorted(cw, u, side="left"), 0, len(xs) - 1)]


def w2_1d(mu: OneDimensional, nu: OneDimensional) -> float:
    """
    Squared W2 between one-dimensional laws, int_0^1 |F_mu^{-1}(u) - F_nu^{-1}(u)|^2 du.

    Accepts GridDensity, 1-D DiscreteMeasure or raw samples (uniform weights). Pairs of
    point clouds go through POT; anything involving a grid density is integrated exactly
    on the merged CDF breakpoints, where both quantile functions are affine.
    """
    a, b = _as_discrete_1d(mu), _as_discrete_1d(nu)
    if a is not None and b is not None:
        return float(
            ot.wasserstein_1d(a.points[:, 0], b.points[:, 0], a.weights, b.weights, p=2)
        )
    breaks_a, qa = _quantile_parts(mu)
    breaks_b, qb = _quantile_parts(nu)
    u = np.unique(np.clip(np.concatenate([breaks_a, breaks_b]), 0.0, 1.0))
    width = np.diff(u)
    keep = width > 0
    left, width = u[:-1][keep], width[keep]
    g1 = qa(left + 0.25 * width) - qb(left + 0.25 * width)
    g3 = qa(left + 0.75 * width) - qb(left + 0.75 * width)
    middle = 0.5 * (g1 + g3)
    rise = 2.0 * (g3 - g1)
    return float(np.sum(width * (middle * middle + rise * rise / 12.0)))


def brenier_map_1d(nu: GridDensity, mu: GridDensity) -> MonotoneMap:
    """
    Monotone map T = F_mu^{-1} o F_nu pushing nu onto mu, sampled at the cell centres of nu.

    T' = nu / (mu o T) by change of variables, with mu linearly interpolated at T(x) and
    floored at 1e-12. Cells where nu is below 1e-12 of its peak are left out.

    Raises:
        SupportError: either density has fewer than two cells of support
    """
    support = nu.values > SUPPORT_FLOOR * nu.values.max()
    if np.count_nonzero(support) < 2 or np.count_nonzero(mu.values > 0) < 2:
        raise SupportError("degenerate CDF: a density is supported on fewer than two cells")
    x = nu.centers[support]
    cdf_nu = np.interp(x, nu.edges, nu.cdf_at_edges())
    values = np.interp(cdf_nu, mu.cdf_at_edges(), mu.edges)
    mu_at_t = np.interp(values, mu.centers, mu.values)
    with np.errstate(divide="ignore"):
        derivative = np.where(mu_at_t > 0, nu.values[support] / mu_at_t, np.inf)
    derivative = np.clip(derivative, DERIVATIVE_FLOOR, 1.0 / DERIVATIVE_FLOOR)
    mass = nu.values[support] * nu.cell_width
    return MonotoneMap(grid=x, values=values, derivative=derivative, source_mass=mass)


def wj_functional_1d(mu: GridDensity, nu: GridDensity, params: ModelParams, drift: bool = True) -> WjValue:
    """
    W2 dissipation functional J(mu | b, nu) in one dimension.

    heat_term = int (T' + 1/T' - 2) nu, and
    drift_term = -int int <b(T(x), T(y)) - b(x, y), T(x) - x> nu(dx) nu(dy),
    which for quadratic W reduces to
    int (V'(T) - V'(x)) D nu - 2 eps (int D^2 nu - (int D nu)^2), D = T - x.
    The drift term enters with the sign that makes J the decay rate of W2^2.
    """
    tmap = brenier_map_1d(nu, mu)
    w = tmap.source_mass
    heat = float(np.sum(tmap.heat_integrand() * w))
    drift_term = 0.0
    if drift:
        x = tmap.grid
        disp = tmap.values - x
        confinement = (grad_V(tmap.values[:, None], params) - grad_V(x[:, None], params))[:, 0]
        spread = np.sum(disp * disp * w) - np.sum(disp * w) ** 2
        drift_term = float(np.sum(confinement * disp * w) - 2.0 * params.eps * spread)
    return WjValue(heat_term=heat, drift_term=drift_term, j=heat + drift_term, transport_map=tmap)


# --- exact discrete transport ------------------------------------------------------------


def w2_exact_discrete(mu: DiscreteMeasure, nu: DiscreteMeasure, cap: int = PLAN_CAP) -> TransportResult:
    """
    Exact squared-Euclidean Kantorovich problem, solved by POT's network simplex.

    Raises:
        ProblemSizeError: n * m plan entries above cap
    """
    entries = mu.n_atoms * nu.n_atoms
    if entries > cap:
        raise ProblemSizeError(
            f"transport plan would have {entries} entries (cap {cap}); subsample the measures"
        )
    if mu.dim != nu.dim:
        raise InvalidMeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    a = mu.weights / mu.weights.sum()
    b = nu.weights / nu.weights.sum()
    cost_matrix = ot.dist(mu.points, nu.points, metric="sqeuclidean")
    plan, log = ot.emd(a, b, cost_matrix, numItermax=EMD_MAX_ITER, log=True)
    if log.get("result_code", 1) != 1:
        logger.warning(f"network simplex stopped early: {log.get('warning')}")
    return TransportResult(cost=float(np.sum(plan * cost_matrix)), plan=plan)


def product_measure(mu: DiscreteMeasure, n: int) -> DiscreteMeasure:
    """N-fold tensor power; atoms are concatenated coordinate blocks."""
    index = np.array(list(itertools.product(range(mu.n_atoms), repeat=n)))
    points = mu.points[index].reshape(len(index), n * mu.dim)
    weights = np.prod(mu.weights[index], axis=1)
    return DiscreteMeasure.from_weights(points, weights)


def tensorization_audit(mu: DiscreteMeasure, nu: DiscreteMeasure, n: int, cap: int = PLAN_CAP) -> AuditValue:
    """lhs = W2^2(mu^{xN}, nu^{xN}), rhs = N W2^2(mu, nu)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    lhs = w2_exact_discrete(product_measure(mu, n), product_measure(nu, n), cap).cost
    rhs = n * w2_exact_discrete(mu, nu, cap).cost
    return AuditValue(lhs=lhs, rhs=rhs)


def _merge_atoms(points: np.ndarray, weights: np.ndarray) -> DiscreteMeasure:
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    merged = np.zeros(len(unique))
    np.add.at(merged, inverse.ravel(), weights)
    return DiscreteMeasure.from_weights(unique, merged)


def _block_permutations(measure: DiscreteMeasure, n_blocks: int, block_dim: int):
    if measure.dim != n_blocks * block_dim:
        raise InvalidMeasureError(f"dimension {measure.dim} is not {n_blocks} blocks of {block_dim}")
    blocks = measure.points.reshape(measure.n_atoms, n_blocks, block_dim)
    for perm in itertools.permutations(range(n_blocks)):
        yield blocks[:, list(perm), :].reshape(measure.n_atoms, -1)


def symmetrize(measure: DiscreteMeasure, n_blocks: int, block_dim: int = 1) -> DiscreteMeasure:
    """Average over all permutations of the coordinate blocks, merging coincident atoms."""
    if n_blocks > SYMMETRIZE_MAX_BLOCKS:
        raise ProblemSizeError(f"symmetrization over {n_blocks}! permutations is capped at N={SYMMETRIZE_MAX_BLOCKS}")
    images = list(_block_permutations(measure, n_blocks, block_dim))
    points = np.concatenate(images)
    weights = np.tile(measure.weights, len(images)) / len(images)
    return _merge_atoms(points, weights)


def is_symmetric(measure: DiscreteMeasure, n_blocks: int, block_dim: int = 1, tol: float = 1e-12) -> bool:
    base = _merge_atoms(measure.points, measure.weights)
    for image in _block_permutations(measure, n_blocks, block_dim):
        permuted = _merge_atoms(image, measure.weights)
        if permuted.n_atoms != base.n_atoms:
            return False
        if not (np.array_equal(permuted.points, base.points) and np.allclose(permuted.weights, base.weights, atol=tol)):
            return False
    return True


def marginal(measure: DiscreteMeasure, ell: int, block_dim: int = 1) -> DiscreteMeasure:
    """Law of the first ell coordinate blocks."""
    return _merge_atoms(measure.points[:, : ell * block_dim], measure.weights)


def marginal_superadditivity_audit(
    g: DiscreteMeasure,
    f: DiscreteMeasure,
    ell: int,
    n_blocks: int,
    block_dim: int = 1,
    cap: int = PLAN_CAP,
) -> AuditValue:
    """
    lhs = W2^2(g^(ell), f^(ell)) / ell against rhs = W2^2(g, f) / N for exchangeable g, f.

    Raises:
        SymmetryError: g or f is not invariant under block permutations (see symmetrize)
    """
    if not 1 <= ell <= n_blocks:
        raise ValueError(f"ell must lie in [1, {n_blocks}], got {ell}")
    for name, measure in (("g", g), ("f", f)):
        if not is_symmetric(measure, n_blocks, block_dim):
            raise SymmetryError(f"{name} is not symmetric under block permutations; symmetrize it first")
    lhs = w2_exact_discrete(marginal(g, ell, block_dim), marginal(f, ell, block_dim), cap).cost / ell
    rhs = w2_exact_discrete(g, f, cap).cost / n_blocks
    return AuditValue(lhs=lhs, rhs=rhs)


# --- mean-field fluctuation functional ---------------------------------------------------


def _sampler(mu: Union[GridDensity, DiscreteMeasure]):
    if isinstance(mu, GridDensity):
        return lambda rng, n: sample_density(mu, rng.random(n))[:, None]
    return lambda rng, n: mu.points[rng.choice(mu.n_atoms, size=n, p=mu.weights)]


def _variance(mu: Union[GridDensity, DiscreteMeasure]) -> float:
    if isinstance(mu, GridDensity):
        return mu.variance()
    m1 = mu.mean()
    return mu.second_moment() - float(m1 @ m1)


def _mean_and_stderr(samples: np.ndarray):
    return float(np.mean(samples)), float(np.std(samples, ddof=1) / math.sqrt(len(samples)))


def f_n_functional(
    mu: Union[GridDensity, DiscreteMeasure],
    params: ModelParams,
    n: int,
    mc_samples: int = 1_000_000,
    seed: int = 0,
    stream: int = 0,
) -> FluctuationValue:
    """
    Mean-field fluctuation (1/N^2) sum_{i != j} E[(b(x_i, x_j) - b*mu(x_i))^2], x ~ mu^{xN}.

    By exchangeability every off-diagonal pair has the same law, so the Monte Carlo
    estimate draws independent pairs and scales by (N - 1)/N. Also reported:
    closed_form = 4 eps^2 (N-1)/N Var(mu), the quadratic-W value; full_form = 4 eps^2 Var(mu),
    which keeps the j = i terms; the cross-term statistic for j != k, which vanishes in
    expectation; and the variant with b(x_i - z, x_j), z ~ mu, inside the square.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = replica_rng(seed, stream)
    draw = _sampler(mu)
    xi, xj, xk, z = (draw(rng, mc_samples) for _ in range(4))
    centre = mean_field_drift(xi, mu, params)
    dev_j = pair_drift(xi, xj, params) - centre
    dev_k = pair_drift(xi, xk, params) - centre
    scale = (n - 1) / n
    square, square_err = _mean_and_stderr(np.sum(dev_j * dev_j, axis=-1))
    cross, cross_err = _mean_and_stderr(np.sum(dev_j * dev_k, axis=-1))
    shifted = pair_drift(xi, xj, params) - pair_drift(xi - z, xj, params)
    definitional, definitional_err = _mean_and_stderr(np.sum(shifted * shifted, axis=-1))
    var = _variance(mu)
    return FluctuationValue(
        mc_estimate=scale * square,
        mc_stderr=scale * square_err,
        closed_form=4.0 * params.eps**2 * scale * var,
        full_form=4.0 * params.eps**2 * var,
        cross_term=cross,
        cross_stderr=cross_err,
        definitional=scale * definitional,
        definitional_stderr=scale * definitional_err,
    )


def fluctuation_closed_form(mu: Union[GridDensity, DiscreteMeasure], params: ModelParams, n: int, include_self: bool = False) -> float:
    """4 eps^2 Var(mu), times (N-1)/N unless the j = i terms are kept."""
    factor = 1.0 if include_self else (n - 1) / n
    return 4.0 * params.eps**2 * factor * _variance(mu)
