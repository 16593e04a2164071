"""
Interacting N-particle diffusion, its couplings with nonlinear particles, and
ensemble observables.

    dX^i = (1/N) sum_j b(X^i, X^j) dt + sqrt(2) dB^i

Time is discretized with explicit Euler-Maruyama. Every replica draws its
Gaussian increments from its own counter-based Philox stream keyed on
(seed, replica), one N x d block per step, so trajectories do not depend on
how replicas are spread over workers.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from errors import IntegrationBlowUpError
from model import ModelParams, mean_field_drift, system_drift, system_energy
from scheduler import WorkerPool, chunked, get_worker_pool

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3


class CouplingMode(str, Enum):
    SYNCHRONOUS = "synchronous"
    REFLECTION = "reflection"


class Scheme(str, Enum):
    EULER_MARUYAMA = "euler_maruyama"


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2:
            raise ValueError(f"positions must have shape (N, d), got {positions.shape}")
        object.__setattr__(self, "positions", positions)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class CoupledEnsemble:
    """Interacting system x, nonlinear system y, and which pairs have merged."""

    x: ParticleEnsemble
    y: ParticleEnsemble
    met: np.ndarray
    mode: CouplingMode = CouplingMode.SYNCHRONOUS
    merge_radius: float = math.sqrt(DEFAULT_DT)

    def __post_init__(self):
        object.__setattr__(self, "met", np.asarray(self.met, dtype=bool))
        object.__setattr__(self, "mode", CouplingMode(self.mode))


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    seed: int = 0
    n_replicas: int = 1
    scheme: Scheme = Scheme.EULER_MARUYAMA
    record_every: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_replicas < 1:
            raise ValueError(f"n_replicas must be >= 1, got {self.n_replicas}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")
        object.__setattr__(self, "scheme", Scheme(self.scheme))


class Observation(NamedTuple):
    time: float
    name: str
    value: float
    replica: int


@dataclass
class SimulationResult:
    records: List[Observation]
    final: List[ParticleEnsemble] = field(default_factory=list)

    def series(self, name: str, replica: Optional[int] = None):
        """(times, values) of one observable; averaged over replicas when replica is None."""
        rows = [r for r in self.records if r.name == name and (replica is None or r.replica == replica)]
        by_time: Dict[float, List[float]] = {}
        for row in rows:
            by_time.setdefault(row.time, []).append(row.value)
        times = np.array(sorted(by_time))
        values = np.array([np.mean(by_time[t]) for t in times])
        return times, values


Observable = Callable[[np.ndarray, ModelParams], float]


def _first_moment(x: np.ndarray, params: ModelParams) -> float:
    return float(np.mean(x[:, 0]))


def _abs_moment(k: int) -> Observable:
    def observable(x: np.ndarray, params: ModelParams) -> float:
        return float(np.mean(np.sum(x * x, axis=-1) ** (k / 2.0)))

    return observable


def _energy(x: np.ndarray, params: ModelParams) -> float:
    return float(system_energy(x, params))


OBSERVABLES: Dict[str, Observable] = {
    "m1": _first_moment,
    "m2": _abs_moment(2),
    "m4": _abs_moment(4),
    "energy": _energy,
}


def histogram_observables(edges: Sequence[float]) -> Dict[str, Observable]:
    """Fraction of particles whose first coordinate falls in each bin, one observable per bin."""
    edges = np.asarray(edges, dtype=float)

    def make(lo: float, hi: float) -> Observable:
        def observable(x: np.ndarray, params: ModelParams) -> float:
            first = x[:, 0]
            return float(np.mean((first >= lo) & (first < hi)))

        return observable

    return {f"hist[{lo:.4g},{hi:.4g})": make(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])}


def replica_rng(seed: int, replica: int, *stream: int) -> np.random.Generator:
    """Counter-based stream for one replica, independent of every other (replica, *stream) key."""
    key = [int(seed), int(replica), *(int(s) for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _advance(positions: np.ndarray, params: ModelParams, dt: float, noise: np.ndarray, drift: bool) -> np.ndarray:
    increment = math.sqrt(2.0 * dt) * noise
    if drift:
        return positions + dt * system_drift(positions, params) + increment
    return positions + increment


def check_finite(positions: np.ndarray, time: float, dt: float):
    if not np.all(np.isfinite(positions)):
        bad = np.argwhere(~np.isfinite(positions))[0]
        particle = int(bad[-2]) if positions.ndim >= 2 else int(bad[0])
        raise IntegrationBlowUpError(particle, time, dt)


def em_step(
    ens: ParticleEnsemble,
    params: ModelParams,
    dt: float,
    noise: np.ndarray,
    drift: bool = True,
) -> ParticleEnsemble:
    """
    One Euler-Maruyama step: x + dt b^N(x) + sqrt(2 dt) noise.

    Args:
        ens: current ensemble
        params: model parameters
        dt: positive time step
        noise: (N, d) standard normals
        drift: False switches the drift off (pure Brownian motion)

    Raises:
        IntegrationBlowUpError: a position became NaN or infinite
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    new = _advance(ens.positions, params, dt, np.asarray(noise, dtype=float), drift)
    check_finite(new, ens.time + dt, dt)
    return ParticleEnsemble(positions=new, time=ens.time + dt)


def _step_sizes(t_start: float, t_end: float, dt: float) -> List[float]:
    span = t_end - t_start
    full = int(math.floor(span / dt + 1e-9))
    steps = [dt] * full
    rest = span - full * dt
    if rest > 1e-12 * max(1.0, abs(t_end)):
        steps.append(rest)
    return steps


def _record(records: List[Observation], batch: np.ndarray, time: float, replicas: Sequence[int],
            observables: Dict[str, Observable], params: ModelParams):
    for name, fn in observables.items():
        for local, replica in enumerate(replicas):
            records.append(Observation(time, name, fn(batch[local], params), replica))


def _resolve_observables(observables) -> Dict[str, Observable]:
    if isinstance(observables, dict):
        return dict(observables)
    resolved = {}
    for name in observables:
        if name not in OBSERVABLES:
            raise ValueError(f"unknown observable {name!r}; known: {sorted(OBSERVABLES)}")
        resolved[name] = OBSERVABLES[name]
    return resolved


def simulate(
    init: Union[ParticleEnsemble, Sequence[ParticleEnsemble]],
    params: ModelParams,
    cfg: SimConfig,
    t_end: float,
    observables: Union[Sequence[str], Dict[str, Observable]] = ("m2",),
    drift: bool = True,
    pool: Optional[WorkerPool] = None,
) -> SimulationResult:
    """
    Run cfg.n_replicas independent copies of the particle system up to t_end.

    Args:
        init: one starting ensemble shared by all replicas, or one per replica
        params: model parameters
        cfg: step size, master seed, replica count, recording interval (in steps)
        t_end: final time, not before the initial time
        observables: names from OBSERVABLES, or a name -> callable mapping
        drift: False simulates pure Brownian motion
        pool: worker pool; replicas are split into contiguous chunks

    Returns:
        SimulationResult with rows ordered by (time, observable, replica)
        and the final ensemble of every replica.
    """
    starts = [init] * cfg.n_replicas if isinstance(init, ParticleEnsemble) else list(init)
    if len(starts) != cfg.n_replicas:
        raise ValueError(f"got {len(starts)} initial ensembles for {cfg.n_replicas} replicas")
    t0 = starts[0].time
    if t_end < t0:
        raise ValueError(f"t_end={t_end} precedes the initial time {t0}")
    fns = _resolve_observables(observables)
    steps = _step_sizes(t0, t_end, cfg.dt)
    times = t0 + np.cumsum(steps)
    pool = pool or get_worker_pool()

    def run_chunk(replicas: Sequence[int]):
        rngs = [replica_rng(cfg.seed, r) for r in replicas]
        batch = np.stack([starts[r].positions for r in replicas])
        records: List[Observation] = []
        time = t0
        _record(records, batch, time, replicas, fns, params)
        for count, step in enumerate(steps, start=1):
            noise = np.stack([rng.standard_normal(batch.shape[1:]) for rng in rngs])
            batch = _advance(batch, params, step, noise, drift)
            time = float(times[count - 1])
            check_finite(batch, time, step)
            if count % cfg.record_every == 0 or count == len(steps):
                _record(records, batch, time, replicas, fns, params)
        return records, [ParticleEnsemble(positions=b, time=time) for b in batch]

    replica_ids = list(range(cfg.n_replicas))
    outputs = pool.map(run_chunk, chunked(replica_ids, pool.max_workers))
    records: List[Observation] = []
    final: List[ParticleEnsemble] = []
    for chunk_records, chunk_final in outputs:
        records.extend(chunk_records)
        final.extend(chunk_final)
    order = {name: i for i, name in enumerate(fns)}
    records.sort(key=lambda r: (r.time, order[r.name], r.replica))
    logger.debug(f"simulated {cfg.n_replicas} replicas over {len(steps)} steps")
    return SimulationResult(records=records, final=final)


def reflection_matrix(e: np.ndarray) -> np.ndarray:
    """I - 2 e e^T for a unit vector e (batched over leading axes)."""
    e = np.asarray(e, dtype=float)
    d = e.shape[-1]
    return np.eye(d) - 2.0 * e[..., :, None] * e[..., None, :]


def coupled_advance(
    x: np.ndarray,
    y: np.ndarray,
    met: np.ndarray,
    mu,
    params: ModelParams,
    dt: float,
    noise: np.ndarray,
    mode: CouplingMode,
    merge_radius: float,
):
    """
    Array form of coupled_step; x, y have shape (..., N, d) and met (..., N).

    Drifts are applied first, then the noise: synchronous pairs share the increment,
    reflected pairs mirror it across the hyperplane orthogonal to the post-drift
    difference. Reflected pairs closer than merge_radius merge for good.
    """
    noise = np.asarray(noise, dtype=float)
    x_drifted = x + dt * system_drift(x, params)
    y_drifted = y + dt * mean_field_drift(y, mu, params)
    scale = math.sqrt(2.0 * dt)
    x_new = x_drifted + scale * noise
    if mode == CouplingMode.SYNCHRONOUS:
        return x_new, y_drifted + scale * noise, met.copy()

    gap = x_drifted - y_drifted
    dist = np.linalg.norm(gap, axis=-1)
    met = met | (dist == 0.0)
    e = gap / np.where(dist > 0, dist, 1.0)[..., None]
    mirrored = noise - 2.0 * np.sum(e * noise, axis=-1, keepdims=True) * e
    y_new = y_drifted + scale * mirrored
    met = met | (np.linalg.norm(x_new - y_new, axis=-1) <= merge_radius)
    y_new = np.where(met[..., None], x_new, y_new)
    return x_new, y_new, met


def coupled_step(c: CoupledEnsemble, mu, params: ModelParams, dt: float, noise: np.ndarray) -> CoupledEnsemble:
    """
    Advance the interacting system and its coupled nonlinear copy by one step.

    mu is the limit law at the current time; only its mean enters the drift.
    """
    x_new, y_new, met = coupled_advance(
        c.x.positions, c.y.positions, c.met, mu, params, dt, noise, c.mode, c.merge_radius
    )
    check_finite(x_new, c.x.time + dt, dt)
    check_finite(y_new, c.y.time + dt, dt)
    return replace(
        c,
        x=ParticleEnsemble(positions=x_new, time=c.x.time + dt),
        y=ParticleEnsemble(positions=y_new, time=c.y.time + dt),
        met=met,
    )


def coupling_gap(c: Union[CoupledEnsemble, tuple]) -> float:
    """(1/N) sum_i |X_i - Y_i|^2 for one replica."""
    if isinstance(c, CoupledEnsemble):
        x, y = c.x.positions, c.y.positions
    else:
        x, y = c
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def marginal_moment(replicas, k: int) -> float:
    """
    Monte Carlo estimate of int |x_1|^k G^N(dx), averaged over particles and replicas.

    Accepts a list of ParticleEnsemble or an array of shape (R, N, d).
    """
    if k < 1:
        raise ValueError(f"moment order must be >= 1, got {k}")
    if isinstance(replicas, np.ndarray):
        stacked = replicas
    else:
        replicas = list(replicas)
        if not replicas:
            raise ValueError("need at least one replica")
        stacked = np.stack([r.positions for r in replicas])
    norms = np.linalg.norm(stacked, axis=-1)
    return float(np.mean(norms**k))


def langevin_sample(
    params: ModelParams,
    n_chains: int,
    t_burn: float,
    dt: float = DEFAULT_DT,
    seed: int = 0,
    x0: float = 0.0,
) -> np.ndarray:
    """
    Long-run single-particle Langevin chains dX = -grad V(X) dt + sqrt(2) dB.

    With N = 1 the interaction vanishes, so the chains target Z^{-1} e^{-V}.
    Returns the final positions, shape (n_chains, d).
    """
    rng = replica_rng(seed, 0)
    x = np.full((n_chains, 1, params.dim), float(x0))
    for step in _step_sizes(0.0, t_burn, dt):
        x = _advance(x, params, step, rng.standard_normal(x.shape), drift=True)
    check_finite(x, t_burn, dt)
    return x[:, 0, :]
