"""
One-dimensional McKean-Vlasov Fokker-Planck solver on a truncated grid.

    d_t mu = d_x ( d_x mu - (b*mu) mu ),   b*mu(x) = -V'(x) + 2 eps (x - m1(mu))

Densities are cell averages on [-L, L] with no-flux walls. The stationary law
is found by a damped self-consistent iteration of the Gibbs map.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, List, Optional

import numpy as np

from errors import DivergenceError, InvalidMeasureError, PositivityError, StabilityError
from model import ModelParams, potential_V

logger = logging.getLogger(__name__)

CFL_SAFETY = 0.4
POSITIVITY_FLOOR = -1e-12
ENTROPY_FLOOR = 1e-300
DEFAULT_DAMPING = 0.5
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True)
class GridDensity:
    """Cell-averaged probability density on the uniform grid of [-half_width, half_width]."""

    half_width: float
    n_cells: int
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.n_cells,):
            raise InvalidMeasureError(f"expected {self.n_cells} cell values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidMeasureError("density has non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def cell_width(self) -> float:
        return 2.0 * self.half_width / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.half_width, self.n_cells)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.n_cells + 1)

    def total_mass(self) -> float:
        return float(self.cell_width * np.sum(self.values))

    def mean(self) -> np.ndarray:
        return np.array([moment_k(self, 1, signed=True)])

    def second_moment(self) -> float:
        return moment_k(self, 2)

    def variance(self) -> float:
        m1 = moment_k(self, 1, signed=True)
        return self.second_moment() - m1 * m1

    def cdf_at_edges(self) -> np.ndarray:
        cdf = np.concatenate([[0.0], np.cumsum(self.values) * self.cell_width])
        return cdf / cdf[-1]

    def with_values(self, values: np.ndarray, time: Optional[float] = None) -> "GridDensity":
        return replace(self, values=values, time=self.time if time is None else time)


@dataclass(frozen=True)
class MomentSnapshot:
    """Mass-one law known only through m1 and m2; all the mean-field drift needs for quadratic W."""

    time: float
    m1: float
    m2: float

    @classmethod
    def of(cls, mu: GridDensity) -> "MomentSnapshot":
        return cls(time=mu.time, m1=moment_k(mu, 1, signed=True), m2=moment_k(mu, 2))

    def total_mass(self) -> float:
        return 1.0

    def mean(self) -> np.ndarray:
        return np.array([self.m1])

    def second_moment(self) -> float:
        return self.m2

    def variance(self) -> float:
        return self.m2 - self.m1 * self.m1


@dataclass
class FixedPointResult:
    density: GridDensity
    residual: float
    iterations: int
    residuals: List[float] = field(default_factory=list)


def cell_centers(half_width: float, n_cells: int) -> np.ndarray:
    h = 2.0 * half_width / n_cells
    return -half_width + h * (np.arange(n_cells) + 0.5)


def default_half_width(a: float) -> float:
    """Truncation radius 3 + 2 max(1, a); the Gibbs tail beyond it is far below 1e-12."""
    return 3.0 + 2.0 * max(1.0, a)


def from_function(fn, half_width: float, n_cells: int, time: float = 0.0) -> GridDensity:
    """Sample a nonnegative function at cell centres and normalize to unit mass."""
    x = cell_centers(half_width, n_cells)
    values = np.asarray(fn(x), dtype=float)
    return _normalized(values, half_width, n_cells, time)


def _normalized(values: np.ndarray, half_width: float, n_cells: int, time: float) -> GridDensity:
    h = 2.0 * half_width / n_cells
    mass = h * np.sum(values)
    if not mass > 0:
        raise InvalidMeasureError("cannot normalize a density with zero mass")
    return GridDensity(half_width=half_width, n_cells=n_cells, values=values / mass, time=time)


def uniform_density(c: float, half_width: float, n_cells: int) -> GridDensity:
    """Uniform law on [-c, c], with exact cell overlaps at the two partial cells."""
    edges = np.linspace(-half_width, half_width, n_cells + 1)
    overlap = np.clip(np.minimum(edges[1:], c) - np.maximum(edges[:-1], -c), 0.0, None)
    return _normalized(overlap, half_width, n_cells, 0.0)


def gaussian_density(mean: float, var: float, half_width: float, n_cells: int) -> GridDensity:
    return from_function(lambda x: np.exp(-0.5 * (x - mean) ** 2 / var), half_width, n_cells)


def gibbs_density(params: ModelParams, half_width: float, n_cells: int) -> GridDensity:
    """Z^{-1} e^{-V}, the stationary law without interaction."""
    return from_function(lambda x: np.exp(-potential_V(x[:, None], params)), half_width, n_cells)


def perturb(mu: GridDensity, rng: np.random.Generator, strength: float = 0.3, modes: int = 4) -> GridDensity:
    """Multiply mu by a random positive trigonometric factor and renormalize."""
    x = mu.centers / mu.half_width
    coeffs = rng.uniform(-1.0, 1.0, size=(modes, 2))
    wave = np.zeros_like(x)
    for k, (ca, cb) in enumerate(coeffs, start=1):
        wave += ca * np.cos(k * math.pi * x) + cb * np.sin(k * math.pi * x)
    factor = np.exp(strength * wave / modes)
    return _normalized(mu.values * factor, mu.half_width, mu.n_cells, mu.time)


def moment_k(mu: GridDensity, k: int, signed: bool = False) -> float:
    """
    Midpoint quadrature of int |x|^k mu(dx).

    With signed=True the integrand is x^k, used for parity checks.
    """
    if k < 0:
        raise ValueError(f"moment order must be nonnegative, got {k}")
    x = mu.centers
    integrand = x**k if signed else np.abs(x) ** k
    return float(mu.cell_width * np.sum(integrand * mu.values))


def effective_potential(mu: GridDensity, params: ModelParams) -> np.ndarray:
    """V + eps W*mu at cell centres, dropping the additive eps m2 constant."""
    x = mu.centers
    m1 = moment_k(mu, 1, signed=True)
    return potential_V(x[:, None], params) - params.eps * (x * x - 2.0 * m1 * x)


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1) with B(0) = 1."""
    small = np.abs(z) < 1e-10
    safe = np.where(small, 1.0, z)
    with np.errstate(over="ignore"):
        out = safe / np.expm1(safe)
    return np.where(small, 1.0 - 0.5 * z, out)


def _face_jumps(mu: GridDensity, params: ModelParams, drift: bool) -> np.ndarray:
    if not drift:
        return np.zeros(mu.n_cells - 1)
    return np.diff(effective_potential(mu, params))


def _admissible_dt(h: float, jump: np.ndarray) -> float:
    speed = np.max(np.abs(jump)) / h if jump.size else 0.0
    bound = h * h / 2.0
    if speed > 0:
        bound = min(bound, h / speed)
    return CFL_SAFETY * bound


def stable_dt(mu: GridDensity, params: ModelParams, drift: bool = True) -> float:
    """Admissible explicit step 0.4 min(h^2/2, h / max|b*mu|)."""
    return _admissible_dt(mu.cell_width, _face_jumps(mu, params, drift))


def fp_step(mu: GridDensity, params: ModelParams, dt: float, drift: bool = True) -> GridDensity:
    """
    One conservative finite-volume step with no-flux walls.

    The face flux is the exponentially fitted (Scharfetter-Gummel) combination of the
    centred diffusive gradient and the upwinded advection; it reduces to pure upwinding
    for strong drift and to centred diffusion when the drift vanishes, and the sampled
    Gibbs state Z^{-1} e^{-V_eps} is an exact discrete equilibrium.

    Args:
        mu: current density
        params: model parameters
        dt: time step, must respect stable_dt
        drift: False disables the potential and the interaction (pure heat flow)

    Raises:
        StabilityError: dt above the CFL bound
        PositivityError: a cell fell below -1e-12
    """
    h = mu.cell_width
    u = mu.values
    jump = _face_jumps(mu, params, drift)
    admissible = _admissible_dt(h, jump)
    if dt > admissible * (1.0 + 1e-12):
        raise StabilityError(dt, admissible)
    flux = (_bernoulli(jump) * u[:-1] - _bernoulli(-jump) * u[1:]) / h
    divergence = np.zeros_like(u)
    divergence[:-1] += flux
    divergence[1:] -= flux
    new = u - (dt / h) * divergence
    lowest = new.min()
    if lowest < POSITIVITY_FLOOR:
        raise PositivityError(f"density reached {lowest:.3e} at t={mu.time + dt:.6g}")
    return mu.with_values(np.maximum(new, 0.0), time=mu.time + dt)


def _step_sizes(t_start: float, t_end: float, dt: float) -> Iterator[float]:
    remaining = t_end - t_start
    while remaining > 1e-12 * max(1.0, abs(t_end)):
        step = min(dt, remaining)
        yield step
        remaining -= step


def evolve(
    mu0: GridDensity,
    params: ModelParams,
    t_end: float,
    dt: Optional[float] = None,
    record_every: int = 1,
    drift: bool = True,
) -> List[GridDensity]:
    """
    Advance mu0 to t_end and return snapshots every `record_every` steps (first and last included).

    dt defaults to 95% of the CFL bound of mu0, leaving room for the drift to move
    with m1. The final step is shortened to land on t_end.
    """
    if t_end < mu0.time:
        raise ValueError(f"t_end={t_end} precedes the initial time {mu0.time}")
    if dt is None:
        dt = 0.95 * stable_dt(mu0, params, drift)
    snapshots = [mu0]
    mu = mu0
    count = 0
    for step in _step_sizes(mu0.time, t_end, dt):
        mu = fp_step(mu, params, step, drift)
        count += 1
        if count % record_every == 0:
            snapshots.append(mu)
    if snapshots[-1] is not mu:
        snapshots.append(mu)
    return snapshots


def track(mu0: GridDensity, params: ModelParams, times: Iterable[float], dt: float, drift: bool = True) -> Iterator[GridDensity]:
    """
    Yield the solution at each of the nondecreasing `times`, keeping only the current state.

    Used to drive nonlinear particles in lock step with the PDE.
    """
    mu = mu0
    for target in times:
        for step in _step_sizes(mu.time, target, dt):
            mu = fp_step(mu, params, step, drift)
        yield mu


def gibbs_map(mu: GridDensity, params: ModelParams) -> GridDensity:
    """Z^{-1} e^{-V - eps W*mu} on the grid of mu."""
    psi = effective_potential(mu, params)
    weights = np.exp(-(psi - psi.min()))
    return _normalized(weights, mu.half_width, mu.n_cells, mu.time)


def l1_distance(mu: GridDensity, nu: GridDensity) -> float:
    return float(mu.cell_width * np.sum(np.abs(mu.values - nu.values)))


def stationary_fixed_point(
    params: ModelParams,
    half_width: Optional[float] = None,
    n_cells: int = 2048,
    damping: float = DEFAULT_DAMPING,
    tol: float = 1e-10,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FixedPointResult:
    """
    Solve mu = Z^{-1} e^{-V - eps W*mu} by damped iteration from the even start Z0^{-1} e^{-V}.

    Raises:
        DivergenceError: residual still above tol after max_iter iterations; the error
            carries the residual history (several stationary solutions may coexist)
    """
    if not 0 < damping <= 1:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if half_width is None:
        half_width = default_half_width(params.a)
    mu = gibbs_density(params, half_width, n_cells)
    residuals: List[float] = []
    for iteration in range(1, max_iter + 1):
        image = gibbs_map(mu, params)
        residual = l1_distance(image, mu)
        residuals.append(residual)
        logger.debug(f"fixed point iteration {iteration}: L1 residual {residual:.3e}")
        if residual < tol:
            return FixedPointResult(density=mu, residual=residual, iterations=iteration, residuals=residuals)
        mu = mu.with_values((1.0 - damping) * mu.values + damping * image.values)
    logger.warning(f"fixed point did not converge: residual {residuals[-1]:.3e} after {max_iter} iterations")
    raise DivergenceError(
        f"stationary iteration stalled at L1 residual {residuals[-1]:.3e} (tol {tol:.1e}); "
        "the self-consistency equation may have several solutions here",
        residuals,
    )


def free_energy(mu: GridDensity, params: ModelParams) -> float:
    """
    F(mu) = int mu ln mu + int V mu + eps/2 int int W(x - y) mu mu.

    The interaction uses int int |x - y|^2 mu mu = 2 (m2 - m1^2); cells below 1e-300
    contribute nothing to the entropy.
    """
    u = mu.values
    h = mu.cell_width
    positive = u > ENTROPY_FLOOR
    entropy = h * np.sum(u[positive] * np.log(u[positive]))
    confinement = h * np.sum(potential_V(mu.centers[:, None], params) * u)
    m1 = moment_k(mu, 1, signed=True)
    interaction = -params.eps * (moment_k(mu, 2) - m1 * m1)
    return float(entropy + confinement + interaction)


def sample(mu: GridDensity, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF samples; the CDF is piecewise linear since the density is cellwise constant."""
    return np.interp(np.asarray(uniforms, dtype=float), mu.cdf_at_edges(), mu.edges)
