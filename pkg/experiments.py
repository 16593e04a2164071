"""
Experiment drivers and acceptance checks.

Each driver takes a validated ExperimentConfig and returns an ExperimentOutcome
holding pass/fail checks, CSV tables, SVG figures, densities and scalar metrics.
write_outcome lays these out under <output_dir>/<experiment>/.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.stats import norm

import limit
import linalg
import model
import particles
import storage
import transport
from config import ExperimentConfig, ExperimentName, save_config
from errors import ConfigError
from model import ModelParams
from particles import CouplingMode
from scheduler import WorkerPool, get_worker_pool

logger = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    passed: bool
    detail: Dict = field(default_factory=dict)


@dataclass
class Table:
    header: List[str]
    rows: List[Sequence]


@dataclass
class Figure:
    series: storage.Series
    xlabel: str
    ylabel: str
    title: str = ""
    logx: bool = False
    logy: bool = False
    scatter: bool = False


@dataclass
class ExperimentOutcome:
    experiment: str
    checks: List[Check] = field(default_factory=list)
    tables: Dict[str, Table] = field(default_factory=dict)
    figures: Dict[str, Figure] = field(default_factory=dict)
    densities: Dict[str, limit.GridDensity] = field(default_factory=dict)
    metrics: Dict[str, object] = field(default_factory=dict)

    def check(self, name: str, passed: bool, **detail) -> bool:
        passed = bool(passed)
        self.checks.append(Check(name, passed, detail))
        if passed:
            logger.info(f"[{self.experiment}] {name}: pass")
        else:
            logger.error(f"[{self.experiment}] {name}: FAIL {detail}")
        return passed

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> Dict:
        return {
            "experiment": self.experiment,
            "pass": self.passed,
            "checks": {c.name: {"pass": c.passed, **c.detail} for c in self.checks},
            "metrics": self.metrics,
        }


# --- shared helpers ------------------------------------------------------------------------


def _half_width(cfg: ExperimentConfig, params: ModelParams) -> float:
    return cfg.grid.half_width or limit.default_half_width(params.a)


def _pde_dt(cfg: ExperimentConfig, mu: limit.GridDensity, params: ModelParams) -> float:
    return cfg.grid.dt or 0.95 * limit.stable_dt(mu, params)


def _require_1d(params: ModelParams, experiment: str):
    if params.dim != 1:
        raise ConfigError(f"{experiment} drives nonlinear particles with the 1-D limit solver; set model.dim = 1")


def _stationary(cfg: ExperimentConfig, params: ModelParams, n_cells: int) -> limit.FixedPointResult:
    return limit.stationary_fixed_point(
        params,
        half_width=_half_width(cfg, params),
        n_cells=n_cells,
        damping=cfg.grid.damping,
        tol=cfg.grid.tol,
        max_iter=cfg.grid.max_iter,
    )


def _particle_times(t_end: float, dt: float) -> np.ndarray:
    """Particle grid 0, dt, ..., t_end; path[k] is the law at the start of step k + 1."""
    n_steps = int(round(t_end / dt))
    return dt * np.arange(n_steps + 1)


def _limit_path(
    mu0: limit.GridDensity,
    params: ModelParams,
    times: np.ndarray,
    dt: float,
    check_every: int = 0,
    reference: Optional[limit.GridDensity] = None,
) -> Tuple[List[limit.MomentSnapshot], List[Tuple[float, float]]]:
    """
    Advance the limit PDE through `times`, keeping only first and second moments.

    With a reference density, W2^2(mu_t, reference) is also recorded every
    check_every times.
    """
    path: List[limit.MomentSnapshot] = []
    checkpoints: List[Tuple[float, float]] = []
    for k, mu in enumerate(limit.track(mu0, params, times, dt)):
        path.append(limit.MomentSnapshot.of(mu))
        if reference is not None and check_every and k % check_every == 0:
            checkpoints.append((float(times[k]), transport.w2_1d(mu, reference)))
    return path, checkpoints


def _synchronous_gaps(
    n: int,
    path: Sequence[limit.MomentSnapshot],
    params: ModelParams,
    cfg: ExperimentConfig,
    mu0: limit.GridDensity,
    stride: int,
) -> np.ndarray:
    """
    Replica-averaged (1/N) sum_i |X_i - Y_i|^2 for synchronously coupled systems.

    X and Y start from the same i.i.d. mu0 draws. Returns the gap at t = 0 and
    after every stride steps.
    """
    dt = cfg.sim.dt
    rngs = [particles.replica_rng(cfg.sim.seed, r, n) for r in range(cfg.sim.n_replicas)]
    x = np.stack([limit.sample(mu0, rng.random(n))[:, None] for rng in rngs])
    y = x.copy()
    met = np.zeros(x.shape[:2], dtype=bool)
    gaps = [0.0]
    for k, mu in enumerate(path[:-1], start=1):
        noise = np.stack([rng.standard_normal((n, 1)) for rng in rngs])
        x, y, met = particles.coupled_advance(
            x, y, met, mu, params, dt, noise, CouplingMode.SYNCHRONOUS, math.sqrt(dt)
        )
        if k % stride == 0:
            particles.check_finite(x, k * dt, dt)
            gaps.append(particles.coupling_gap((x, y)))
    logger.debug(f"N={n}: final gap {gaps[-1]:.3e}")
    return np.array(gaps)


def decay_rate(times: Sequence[float], w2: Sequence[float], floor: float = 1e-12) -> Optional[float]:
    """Exponential rate alpha in W2^2(mu_t, mu_inf) ~ e^{-alpha t}, fitted on values above floor."""
    t = np.asarray(times, dtype=float)
    w = np.asarray(w2, dtype=float)
    keep = w > floor
    if np.count_nonzero(keep) < 2:
        return None
    slope, _ = np.polyfit(t[keep], np.log(w[keep]), 1)
    return float(-slope)


def switch_time(n: int, alpha_hat: float, params: ModelParams, eta: float, delta: Optional[float] = None) -> float:
    """
    Switch time T_N = delta ln N between the finite-horizon and the long-time estimates.

    delta defaults to 1 / (2 (alpha_hat + 4 (a + eps + eta))).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if delta is None:
        delta = 1.0 / (2.0 * (alpha_hat + 4.0 * (params.a + params.eps + eta)))
    return delta * math.log(n)


# --- limit-equation experiments ----------------------------------------------------------


def _particle_moments(
    cfg: ExperimentConfig, params: ModelParams, mu0: limit.GridDensity, t_end: float, n: int, pool: WorkerPool
) -> particles.SimulationResult:
    """Replicas of the N-particle system started from i.i.d. mu0 draws, recording m2."""
    starts = [
        particles.ParticleEnsemble(limit.sample(mu0, particles.replica_rng(cfg.sim.seed, r, 2).random(n))[:, None])
        for r in range(cfg.sim.n_replicas)
    ]
    return particles.simulate(starts, params, cfg.sim.sim_config(), t_end, ("m2",), pool=pool)


def moment_decay(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    """Moment envelope, free-energy decay, stationary solution and its stability under evolve."""
    out = ExperimentOutcome(ExperimentName.MOMENT_DECAY.value)
    params = cfg.model.params()
    md = cfg.moment_decay
    half_width = _half_width(cfg, params)
    c = math.sqrt(3.0 * md.m2_0)
    if c >= half_width:
        raise ConfigError(f"moment_decay.m2_0={md.m2_0} needs support sqrt(3 m2_0)={c:.3g} inside grid.half_width={half_width:.3g}")

    mu0 = limit.uniform_density(c, half_width, cfg.grid.n_cells)
    dt = _pde_dt(cfg, mu0, params)
    logger.info(f"moment decay: a={params.a} eps={params.eps} L={half_width} n={cfg.grid.n_cells} dt={dt:.3e}")

    snapshots = limit.evolve(mu0, params, md.t_end, dt, record_every=md.snapshot_every)
    times = np.array([mu.time for mu in snapshots])
    m2 = np.array([limit.moment_k(mu, 2) for mu in snapshots])
    m2_0 = m2[0]
    envelopes = {d: model.moment_envelope(m2_0, times, d, params) for d in md.deltas}
    worst = min(float(np.min((1.0 + md.margin) * env - m2)) for env in envelopes.values())
    out.check("moment_envelope", worst >= 0.0, worst_slack=worst, snapshots=len(snapshots))
    out.tables["moment_envelope"] = Table(
        ["time", "m2"] + [f"envelope_delta_{d!r}" for d in md.deltas],
        [[t, v, *(envelopes[d][k] for d in md.deltas)] for k, (t, v) in enumerate(zip(times, m2))],
    )
    out.figures["moment_envelope"] = Figure(
        {"m2": (times, m2), **{f"envelope delta={d:g}": (times, envelopes[d]) for d in md.deltas}},
        "t", "second moment", "Second moment against the moment envelope",
    )

    steps = mu0.time + dt * np.arange(1, md.free_energy_steps + 1)
    energies = [limit.free_energy(mu0, params)] + [limit.free_energy(mu, params) for mu in limit.track(mu0, params, steps, dt)]
    increments = np.diff(energies)
    out.check(
        "free_energy_monotone",
        np.all(increments <= md.free_energy_slack),
        max_increment=float(increments.max()),
        steps=md.free_energy_steps,
    )
    out.tables["free_energy"] = Table(
        ["step", "time", "free_energy"],
        [[k, k * dt, f] for k, f in enumerate(energies) if k % md.snapshot_every == 0 or k == len(energies) - 1],
    )

    fixed = _stationary(cfg, params, md.stationary_n_cells)
    mu_inf = fixed.density
    m2_inf = mu_inf.second_moment()
    bound = model.stationary_moment_bound(params)
    out.check("fixed_point_residual", fixed.residual < md.residual_tol, residual=fixed.residual, iterations=fixed.iterations)
    out.check("stationary_moment_bound", m2_inf <= bound + md.moment_margin, m2=m2_inf, bound=bound)
    m1_inf = limit.moment_k(mu_inf, 1, signed=True)
    out.check("stationary_parity", abs(m1_inf) <= 1e-10, m1=m1_inf)
    out.densities["stationary"] = mu_inf

    f_inf = limit.free_energy(mu_inf, params)
    perturbed = [
        limit.free_energy(limit.perturb(mu_inf, particles.replica_rng(cfg.sim.seed, k)), params)
        for k in range(md.perturbations)
    ]
    if perturbed:
        out.check("free_energy_minimizer", f_inf <= min(perturbed) + 1e-12, f_stationary=f_inf, f_perturbed_min=min(perturbed))

    coarse = _stationary(cfg, params, cfg.grid.n_cells).density
    checkpoints = np.linspace(0.0, md.drift_t_end, 101)[1:]
    drift_dt = _pde_dt(cfg, coarse, params)
    drifts = [limit.l1_distance(mu, coarse) for mu in limit.track(coarse, params, checkpoints, drift_dt)]
    max_drift = max(drifts) if drifts else 0.0
    out.check("stationary_drift", max_drift < md.drift_tol, max_l1=max_drift, t_end=md.drift_t_end)
    out.tables["stationary_drift"] = Table(["time", "l1_distance"], list(zip(checkpoints, drifts)))

    sim = _particle_moments(cfg, params, mu0, md.t_end, md.particles, pool)
    p_times, p_mean = sim.series("m2")
    per_replica = np.array([r.value for r in sim.records]).reshape(len(p_times), -1)
    p_err = per_replica.std(axis=1, ddof=1) / math.sqrt(per_replica.shape[1]) if per_replica.shape[1] > 1 else np.zeros(len(p_times))
    tightest = np.min([model.moment_envelope(m2_0, p_times, d, params) for d in md.deltas], axis=0)
    particle_slack = (1.0 + md.margin) * tightest + md.particle_sigma * p_err - p_mean
    out.check(
        "particle_moment_envelope",
        np.all(particle_slack >= 0.0),
        worst_slack=float(particle_slack.min()),
        particles=md.particles,
        replicas=cfg.sim.n_replicas,
    )
    out.tables["particle_moments"] = Table(["time", "observable", "value", "replica"], [list(r) for r in sim.records])
    out.figures["particle_moments"] = Figure(
        {"particles": (p_times, p_mean), "limit": (times, m2)}, "t", "second moment", "Particle and limit second moments"
    )

    out.metrics.update(
        {"m2_stationary": m2_inf, "m2_bound": bound, "free_energy_stationary": f_inf, "pde_dt": dt}
    )
    return out


def wj_audit(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    """J(mu | b, mu_inf) >= kappa W2^2(mu, mu_inf) on perturbations of the stationary law."""
    out = ExperimentOutcome(ExperimentName.WJ_AUDIT.value)
    params = cfg.model.params()
    wj = cfg.wj
    consts = model.wj_constants(params.a, params.eps, params.dim)
    out.metrics.update(
        {"r_a": consts.r_a, "c1": consts.c1, "c2": consts.c2, "kappa_a": consts.kappa_a, "eps_a": consts.eps_a, "kappa": consts.kappa}
    )
    out.check("feasible_regime", consts.feasible, kappa=consts.kappa, eps_a=consts.eps_a)

    mu_inf = _stationary(cfg, params, cfg.grid.n_cells).density
    out.densities["stationary"] = mu_inf

    def evaluate(k: int):
        mu = limit.perturb(mu_inf, particles.replica_rng(cfg.sim.seed, k), strength=wj.strength)
        value = transport.wj_functional_1d(mu, mu_inf, params)
        return k, transport.w2_1d(mu, mu_inf), value, float(np.min(value.transport_map.heat_integrand()))

    rows = pool.map(evaluate, range(wj.perturbations))
    heat_min = min(r[3] for r in rows)
    out.check("heat_term_sign", heat_min >= wj.heat_floor, min_integrand=heat_min)
    ratios = []
    table = []
    for k, w2, value, _ in rows:
        target = consts.kappa * w2
        ratios.append(value.j / target if target > 0 else math.inf)
        table.append([k, w2, value.heat_term, value.drift_term, value.j, target])
    passed = all(value.j >= (1.0 - wj.margin) * consts.kappa * w2 for _, w2, value, _ in rows)
    out.check("wj_inequality", passed and consts.feasible, min_ratio=min(ratios), kappa=consts.kappa)
    out.tables["wj_audit"] = Table(["perturbation", "w2_squared", "heat_term", "drift_term", "j", "kappa_w2"], table)
    out.figures["wj_audit"] = Figure(
        {"J": ([r[1] for r in table], [r[4] for r in table]), "kappa W2^2": ([r[1] for r in table], [r[5] for r in table])},
        "W2^2(mu, mu_inf)", "value", "Dissipation functional against kappa W2^2", logx=True, logy=True, scatter=True,
    )
    return out


# --- particle experiments ----------------------------------------------------------------


def _gap_experiment(cfg: ExperimentConfig, pool: WorkerPool, name: ExperimentName) -> Tuple[ExperimentOutcome, Dict[int, np.ndarray], np.ndarray, list]:
    out = ExperimentOutcome(name.value)
    params = cfg.model.params()
    _require_1d(params, name.value)
    ch = cfg.chaos
    dt = cfg.sim.dt
    half_width = _half_width(cfg, params)
    mu0 = limit.gaussian_density(0.0, ch.init_var, half_width, cfg.grid.n_cells)
    times = _particle_times(ch.t_end, dt)
    stride = max(1, int(round(ch.sample_every / dt)))
    pde_dt = _pde_dt(cfg, mu0, params)

    reference = None
    check_every = 0
    if name == ExperimentName.UNIFORM_IN_TIME:
        reference = _stationary(cfg, params, cfg.grid.n_cells).density
        check_every = stride
    logger.info(f"{name.value}: advancing the limit law over {len(times)} steps (PDE dt={pde_dt:.3e})")
    path, checkpoints = _limit_path(mu0, params, times, pde_dt, check_every, reference)

    gaps = dict(zip(ch.n_values, pool.map(lambda n: _synchronous_gaps(n, path, params, cfg, mu0, stride), ch.n_values)))
    sample_times = dt * stride * np.arange(len(next(iter(gaps.values()))))

    sups = {n: float(np.max(g)) for n, g in gaps.items()}
    ratios = [sups[a] / sups[b] if sups[b] > 0 else math.inf for a, b in zip(ch.n_values, ch.n_values[1:])]
    # band is quoted per 4x step in N
    powers = [math.log(b / a) / math.log(4.0) for a, b in zip(ch.n_values, ch.n_values[1:])]
    in_band = all(ch.ratio_min**q <= r <= ch.ratio_max**q for r, q in zip(ratios, powers))
    out.check("chaos_scaling", in_band, sup_gap={str(n): v for n, v in sups.items()}, ratios=ratios)
    out.tables["coupling_gap"] = Table(
        ["n", "time", "gap"], [[n, t, g] for n in ch.n_values for t, g in zip(sample_times, gaps[n])]
    )
    out.figures["coupling_gap"] = Figure(
        {f"N={n}": (sample_times[1:], gaps[n][1:]) for n in ch.n_values},
        "t", "(1/N) sum |X - Y|^2", "Synchronous coupling gap", logy=True,
    )
    out.figures["gap_scaling"] = Figure(
        {"sup_t gap": (ch.n_values, [sups[n] for n in ch.n_values])}, "N", "sup gap", "Gap against N", logx=True, logy=True
    )
    out.metrics["sup_gap"] = {str(n): v for n, v in sups.items()}
    out.metrics["n_replicas"] = cfg.sim.n_replicas
    return out, gaps, sample_times, checkpoints


def chaos_scaling(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    out, _, _, _ = _gap_experiment(cfg, pool, ExperimentName.CHAOS_SCALING)
    return out


def uniform_in_time(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    """Chaos scaling over a long horizon, plus a check that the gap has stopped growing."""
    out, gaps, sample_times, checkpoints = _gap_experiment(cfg, pool, ExperimentName.UNIFORM_IN_TIME)
    params = cfg.model.params()
    ch = cfg.chaos
    if params.eps < params.a / 2.0:
        consts = model.wj_constants(params.a, params.eps, params.dim)
        feasible = consts.feasible
        out.metrics["kappa"] = consts.kappa
    else:
        feasible = False
    out.metrics["feasible"] = feasible
    if not feasible:
        logger.warning(f"(a, eps) = ({params.a}, {params.eps}) is outside the regime with explicit WJ constants")

    quarter = sample_times <= ch.t_end / 4.0
    early = (sample_times > ch.t_end / 4.0) & (sample_times <= ch.t_end / 2.0)
    late = sample_times > ch.t_end / 2.0
    growth = {}
    for n, g in gaps.items():
        reference = float(np.max(g[early])) if np.any(early) else float(np.max(g[quarter]))
        growth[str(n)] = float(np.max(g[late])) / reference if reference > 0 else 0.0
    out.check("uniform_in_time", all(v <= ch.growth_factor for v in growth.values()), late_over_mid=growth)

    alpha_hat = decay_rate([p[0] for p in checkpoints], [p[1] for p in checkpoints])
    out.metrics["alpha_hat"] = alpha_hat
    if alpha_hat is not None:
        out.metrics["switch_time"] = {str(n): switch_time(n, alpha_hat, params, cfg.eta) for n in ch.n_values}
    out.tables["limit_decay"] = Table(["time", "w2_squared_to_stationary"], checkpoints)
    return out


def _initial_pair(rng: np.random.Generator, n: int, mu0: limit.GridDensity, initial: str, rho: float):
    """(X0, Y0) with Y0 i.i.d. mu0 and X0 either equal to Y0 or a Gaussian-copula exchangeable draw."""
    w = rng.standard_normal(n)
    y0 = limit.sample(mu0, norm.cdf(w))
    if initial == "iid":
        return y0.copy(), y0
    z = math.sqrt(rho) * rng.standard_normal() + math.sqrt(1.0 - rho) * w
    return limit.sample(mu0, norm.cdf(z)), y0


def prop23_audit(cfg: ExperimentConfig, pool: Optional[WorkerPool] = None) -> ExperimentOutcome:
    """
    Finite-horizon coupling estimate between G_t^N and mu_t^{xN} at small N.

    Y are nonlinear particles driven by the limit law and sharing Brownian
    increments with X. Each replica is one atom in R^N; the two replica clouds
    are compared by exact OT, and the chain

        W(t) <= W(0) + eta int_0^t W + eta^{-1} int_0^t F_N,

    with F_N = 4 eps^2 (N-1)/N Var(mu_s), is checked at every sample time. The
    looser bound with (2L + eta) and the self term kept in F is tabulated
    beside it. The fluctuation functional is also checked against its closed form.
    """
    pool = pool or get_worker_pool()
    out = ExperimentOutcome(ExperimentName.PROP23_AUDIT.value)
    params = cfg.model.params()
    _require_1d(params, out.experiment)
    p = cfg.prop23
    n, dt, eta = p.n, cfg.sim.dt, cfg.eta
    n_replicas = cfg.sim.n_replicas
    if n_replicas**2 > p.plan_cap:
        raise ConfigError(
            f"{n_replicas} replicas need {n_replicas**2} transport plan entries, above prop23.plan_cap={p.plan_cap}; lower sim.n_replicas"
        )

    half_width = _half_width(cfg, params)
    mu0 = limit.gaussian_density(0.0, p.init_var, half_width, cfg.grid.n_cells)
    times = _particle_times(p.t_end, dt)
    stride = max(1, int(round(p.sample_every / dt)))
    path, _ = _limit_path(mu0, params, times, _pde_dt(cfg, mu0, params))

    rngs = [particles.replica_rng(cfg.sim.seed, r) for r in range(n_replicas)]
    pairs = [_initial_pair(rng, n, mu0, p.initial, p.copula_rho) for rng in rngs]
    x = np.stack([pair[0] for pair in pairs])[:, :, None]
    y = np.stack([pair[1] for pair in pairs])[:, :, None]
    met = np.zeros(x.shape[:2], dtype=bool)

    def clouds_w2(x_now: np.ndarray, y_now: np.ndarray) -> Tuple[float, float]:
        gx = transport.DiscreteMeasure.uniform(x_now[:, :, 0])
        gy = transport.DiscreteMeasure.uniform(y_now[:, :, 0])
        coupling = float(np.mean(np.sum((x_now - y_now)[:, :, 0] ** 2, axis=1)))
        return transport.w2_exact_discrete(gx, gy, p.plan_cap).cost, coupling

    sample_times = [0.0]
    w2_rows = [clouds_w2(x, y)]
    variances = [path[0].variance()]
    for k, mu in enumerate(path[:-1], start=1):
        noise = np.stack([rng.standard_normal((n, 1)) for rng in rngs])
        x, y, met = particles.coupled_advance(x, y, met, mu, params, dt, noise, CouplingMode.SYNCHRONOUS, math.sqrt(dt))
        if k % stride == 0:
            particles.check_finite(x, k * dt, dt)
            sample_times.append(k * dt)
            w2_rows.append(clouds_w2(x, y))
            variances.append(path[k].variance())

    t = np.array(sample_times)
    w2 = np.array([r[0] for r in w2_rows])
    coupling = np.array([r[1] for r in w2_rows])
    variances = np.array(variances)
    fn = 4.0 * params.eps**2 * (n - 1) / n * variances
    fn_full = 4.0 * params.eps**2 * variances
    lipschitz = model.one_sided_lipschitz(params)
    int_w2 = cumulative_trapezoid(w2, t, initial=0.0)
    rhs = w2[0] + eta * int_w2 + cumulative_trapezoid(fn, t, initial=0.0) / eta
    slack = rhs - w2
    # self-interaction kept and the drift cross term bounded by L; reported only
    rhs_lipschitz = w2[0] + (2.0 * lipschitz + eta) * int_w2 + cumulative_trapezoid(fn_full, t, initial=0.0) / eta
    out.check("prop23_chain", np.all(slack >= -1e-12), min_slack=float(slack.min()), initial=p.initial)
    out.check("prop23_initial_tight", abs(slack[0]) <= 1e-12, slack_t0=float(slack[0]))
    out.tables["prop23_chain"] = Table(
        ["time", "w2_squared", "coupling_cost", "fluctuation", "rhs", "slack", "fluctuation_full", "rhs_lipschitz"],
        [list(row) for row in zip(t, w2, coupling, fn, rhs, slack, fn_full, rhs_lipschitz)],
    )
    out.figures["prop23_chain"] = Figure(
        {"W2^2(G_t, mu_t^N)": (t, w2), "bound": (t, rhs)}, "t", "W2^2", "Coupling estimate at small N"
    )

    fn_rows = []
    fn_ok = True
    cross_ok = True
    stream = 0
    for eps in p.fn_eps:
        for size in p.fn_n:
            value = transport.f_n_functional(mu0, params.with_eps(eps), size, p.fn_samples, cfg.sim.seed, stream)
            stream += 1
            fn_ok &= abs(value.mc_estimate - value.closed_form) <= p.sigma * value.mc_stderr + 1e-15
            cross_ok &= abs(value.cross_term) <= p.sigma * value.cross_stderr + 1e-15
            fn_rows.append([
                eps, size, value.mc_estimate, value.mc_stderr, value.closed_form, value.full_form,
                value.cross_term, value.cross_stderr, value.definitional, value.definitional_stderr,
            ])
    out.check("fn_closed_form", fn_ok, sigma=p.sigma, cases=len(fn_rows))
    out.check("fn_cross_term", cross_ok, sigma=p.sigma)
    out.tables["fn_consistency"] = Table(
        ["eps", "n", "mc_estimate", "mc_stderr", "closed_form", "full_form",
         "cross_term", "cross_stderr", "definitional", "definitional_stderr"],
        fn_rows,
    )
    out.metrics.update({"one_sided_lipschitz": lipschitz, "eta": eta, "n": n, "n_replicas": n_replicas})
    return out


# --- constants and audits ----------------------------------------------------------------


def constants_frontier(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    """Sweep a and report R_a, C1, C2, kappa_a, eps_a and feasibility, plus the bisected a*."""
    out = ExperimentOutcome(ExperimentName.CONSTANTS_FRONTIER.value)
    fr = cfg.frontier
    if fr.a_max <= fr.a_min:
        raise ConfigError(f"frontier.a_max={fr.a_max} must exceed frontier.a_min={fr.a_min}")
    dim = cfg.model.dim
    rows = []
    consistent = True
    for a in np.geomspace(fr.a_min, fr.a_max, fr.points):
        a = float(a)
        if fr.eps >= a / 2.0:
            rows.append([a, fr.eps, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, False])
            continue
        c = model.wj_constants(a, fr.eps, dim)
        consistent &= abs(c.kappa_a - min(c.c1, c.c2)) <= 1e-9 * max(1.0, abs(c.kappa_a))
        rows.append([a, fr.eps, c.r_a, c.c1, c.c2, c.kappa_a, c.eps_a, c.kappa, c.feasible])
    a_star = model.a_star_frontier(fr.eps, dim, fr.a_min, fr.a_max)
    out.metrics["a_star"] = a_star
    out.check("kappa_a_is_min_c1_c2", consistent)
    if a_star is not None:
        agrees = all(bool(r[8]) == (r[0] < a_star) for r in rows if abs(r[0] - a_star) > 1e-6 * a_star and not math.isnan(r[2]))
        out.check("frontier_consistent", agrees, a_star=a_star)
    else:
        logger.warning("no feasibility frontier inside the swept range")
    out.tables["constants_frontier"] = Table(
        ["a", "eps", "r_a", "c1", "c2", "kappa_a", "eps_a", "kappa", "feasible"], rows
    )
    valid = [r for r in rows if not math.isnan(r[2])]
    out.figures["constants_frontier"] = Figure(
        {"C1": ([r[0] for r in valid], [r[3] for r in valid]), "C2": ([r[0] for r in valid], [r[4] for r in valid])},
        "a", "constant", "WJ constants against the well depth", logx=True,
    )
    return out


def trace_audit(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    out = ExperimentOutcome(ExperimentName.TRACE_AUDIT.value)
    tr = cfg.trace
    report = linalg.superadditivity_audit(cfg.sim.seed, tr.trials, tr.d_max, tr.n_max, tr.tol, pool)
    out.check("trace_superadditivity", report.passed, violations=len(report.violations), trials=len(report.trials))
    if tr.equality_trials:
        failures = linalg.equality_audit(cfg.sim.seed, tr.equality_trials, tr.d_max, tr.n_max)
        out.check("block_diagonal_equality", failures == 0, failures=failures, trials=tr.equality_trials)
    out.tables["trace_audit"] = Table(
        ["trial", "d", "n", "lhs", "rhs", "margin", "condition_number"],
        [[r.trial, r.d, r.n, r.lhs, r.rhs, r.margin, r.condition_number] for r in report.trials],
    )
    out.figures["trace_audit"] = Figure(
        {"relative margin": ([r.condition_number for r in report.trials], [r.margin / r.lhs for r in report.trials])},
        "condition number", "(lhs - rhs) / lhs", "Trace superadditivity margin", logx=True, scatter=True,
    )
    out.metrics["max_condition_number"] = max(r.condition_number for r in report.trials)
    out.metrics["min_relative_margin"] = min(r.margin / r.lhs for r in report.trials)
    if report.violations:
        out.metrics["counterexamples"] = report.violations
    return out


def _random_discrete(rng: np.random.Generator, atoms: int, dim: int) -> transport.DiscreteMeasure:
    return transport.DiscreteMeasure.from_weights(rng.standard_normal((atoms, dim)), rng.dirichlet(np.ones(atoms)))


def superadditivity_audit(cfg: ExperimentConfig, pool: WorkerPool) -> ExperimentOutcome:
    """Marginal superadditivity on symmetrized random pairs, and tensorization of W2^2."""
    out = ExperimentOutcome(ExperimentName.SUPERADDITIVITY_AUDIT.value)
    sa = cfg.superadditivity
    seed = cfg.sim.seed

    def marginal_case(k: int):
        rng = particles.replica_rng(seed, k, 0)
        n = int(rng.integers(2, sa.n_max + 1))
        g = transport.symmetrize(_random_discrete(rng, int(rng.integers(1, sa.atoms_max + 1)), n), n)
        f = transport.symmetrize(_random_discrete(rng, int(rng.integers(1, sa.atoms_max + 1)), n), n)
        ell = int(rng.integers(1, n + 1))
        audit = transport.marginal_superadditivity_audit(g, f, ell, n)
        return [k, n, ell, g.n_atoms, f.n_atoms, audit.lhs, audit.rhs, audit.lhs <= audit.rhs + sa.tol]

    def tensor_case(k: int):
        rng = particles.replica_rng(seed, k, 1)
        n = int(rng.integers(1, sa.tensor_n_max + 1))
        mu = _random_discrete(rng, int(rng.integers(2, sa.tensor_atoms_max + 1)), 1)
        nu = _random_discrete(rng, int(rng.integers(2, sa.tensor_atoms_max + 1)), 1)
        audit = transport.tensorization_audit(mu, nu, n)
        return [k, n, audit.lhs, audit.rhs, abs(audit.lhs - audit.rhs) <= sa.tol]

    marginal_rows = pool.map(marginal_case, range(sa.pairs))
    tensor_rows = pool.map(tensor_case, range(sa.tensor_pairs))
    out.check("marginal_superadditivity", all(r[-1] for r in marginal_rows), failures=sum(not r[-1] for r in marginal_rows))
    out.check("tensorization", all(r[-1] for r in tensor_rows), failures=sum(not r[-1] for r in tensor_rows))
    out.tables["marginal_superadditivity"] = Table(
        ["pair", "n", "ell", "atoms_g", "atoms_f", "lhs", "rhs", "pass"], marginal_rows
    )
    out.tables["tensorization"] = Table(["pair", "n", "lhs", "rhs", "pass"], tensor_rows)
    out.figures["marginal_superadditivity"] = Figure(
        {"pairs": ([r[6] for r in marginal_rows], [r[5] for r in marginal_rows])},
        "W2^2(g, f) / N", "W2^2(g_ell, f_ell) / ell", "Marginal superadditivity", scatter=True,
    )
    return out


EXPERIMENTS: Dict[ExperimentName, Callable[[ExperimentConfig, WorkerPool], ExperimentOutcome]] = {
    ExperimentName.MOMENT_DECAY: moment_decay,
    ExperimentName.CHAOS_SCALING: chaos_scaling,
    ExperimentName.UNIFORM_IN_TIME: uniform_in_time,
    ExperimentName.WJ_AUDIT: wj_audit,
    ExperimentName.PROP23_AUDIT: prop23_audit,
    ExperimentName.CONSTANTS_FRONTIER: constants_frontier,
    ExperimentName.TRACE_AUDIT: trace_audit,
    ExperimentName.SUPERADDITIVITY_AUDIT: superadditivity_audit,
}


def run_experiment(cfg: ExperimentConfig, pool: Optional[WorkerPool] = None) -> ExperimentOutcome:
    pool = pool or (WorkerPool(cfg.workers) if cfg.workers else get_worker_pool())
    logger.info(f"running {cfg.experiment.value} with seed {cfg.sim.seed} on {pool.max_workers} workers")
    started = time.perf_counter()
    outcome = EXPERIMENTS[cfg.experiment](cfg, pool)
    logger.info(f"{cfg.experiment.value} finished in {time.perf_counter() - started:.1f}s: {'pass' if outcome.passed else 'FAIL'}")
    return outcome


def write_outcome(outcome: ExperimentOutcome, cfg: ExperimentConfig) -> Path:
    """Write tables, figures, densities, summary.json and the effective config; return the run directory."""
    run_dir = Path(cfg.output_dir) / outcome.experiment
    run_dir.mkdir(parents=True, exist_ok=True)
    params = cfg.model.params()
    for name, table in outcome.tables.items():
        storage.write_csv(run_dir / f"{name}.csv", table.header, table.rows)
    for name, fig in outcome.figures.items():
        storage.plot_series(run_dir / f"{name}.svg", fig.series, fig.xlabel, fig.ylabel, fig.title, fig.logx, fig.logy, fig.scatter)
    for name, mu in outcome.densities.items():
        storage.save_grid_density(run_dir / f"density_{name}.csv", mu, params)
    checks_rows = [[c.name, c.passed] for c in outcome.checks]
    storage.write_csv(run_dir / "checks.csv", ["check", "pass"], checks_rows)
    storage.write_summary(run_dir / "summary.json", outcome.summary())
    save_config(cfg, run_dir / "config.json")
    return run_dir
