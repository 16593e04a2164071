import math

import numpy as np
import pytest

from errors import IntegrationBlowUpError
from limit import gibbs_density
from model import ModelParams, stationary_moment_bound
from particles import (
    CoupledEnsemble,
    CouplingMode,
    ParticleEnsemble,
    SimConfig,
    coupled_step,
    coupling_gap,
    em_step,
    histogram_observables,
    langevin_sample,
    marginal_moment,
    reflection_matrix,
    replica_rng,
    simulate,
)
from scheduler import WorkerPool
from transport import DiscreteMeasure

DELTA_ZERO = DiscreteMeasure(points=[[0.0]], weights=[1.0])


@pytest.fixture
def params():
    return ModelParams(a=1.0, eps=0.1)


class TestEmStep:
    def test_origin_without_noise_is_fixed(self, params):
        ens = ParticleEnsemble(np.zeros((3, 1)))
        out = em_step(ens, params, 0.01, np.zeros((3, 1)))
        assert np.array_equal(out.positions, ens.positions)
        assert out.time == pytest.approx(0.01)

    def test_deterministic_euler_step(self, params):
        out = em_step(ParticleEnsemble(np.array([[1.0]])), params, 0.01, np.zeros((1, 1)))
        assert out.positions[0, 0] == pytest.approx(0.98)

    def test_variance_grows_like_brownian_motion(self, params):
        n, dt, steps = 10_000, 0.01, 10
        rng = np.random.default_rng(7)
        ens = ParticleEnsemble(np.zeros((n, 1)))
        for _ in range(steps):
            ens = em_step(ens, params, dt, rng.standard_normal((n, 1)), drift=False)
        expected = 2.0 * dt * steps
        stderr = expected * math.sqrt(2.0 / (n - 1))
        assert abs(np.var(ens.positions, ddof=1) - expected) <= 3 * stderr

    def test_blow_up_names_particle(self, params):
        ens = ParticleEnsemble(np.array([[0.0], [1e103]]))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(IntegrationBlowUpError) as info:
                em_step(ens, params, 0.1, np.zeros((2, 1)))
        assert info.value.particle == 1
        assert "smaller time step" in str(info.value)

    def test_rejects_nonpositive_dt(self, params):
        with pytest.raises(ValueError):
            em_step(ParticleEnsemble(np.zeros((1, 1))), params, 0.0, np.zeros((1, 1)))

    def test_exchangeability(self, params):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 2))
        noise = rng.normal(size=(6, 2))
        perm = rng.permutation(6)
        p2 = ModelParams(a=0.5, eps=0.2, dim=2)
        direct = em_step(ParticleEnsemble(x), p2, 0.01, noise).positions
        permuted = em_step(ParticleEnsemble(x[perm]), p2, 0.01, noise[perm]).positions
        np.testing.assert_allclose(permuted, direct[perm], rtol=0, atol=1e-14)


class TestSimulate:
    def test_zero_horizon_records_initial_state(self, params):
        init = ParticleEnsemble(np.array([[1.0], [-1.0]]))
        result = simulate(init, params, SimConfig(n_replicas=3), 0.0, observables=("m1", "m2"))
        assert len(result.records) == 6
        assert {r.time for r in result.records} == {0.0}
        times, m2 = result.series("m2")
        assert m2 == pytest.approx([1.0])

    def test_rejects_past_horizon(self, params):
        init = ParticleEnsemble(np.zeros((2, 1)), time=1.0)
        with pytest.raises(ValueError):
            simulate(init, params, SimConfig(), 0.5)

    def test_unknown_observable(self, params):
        with pytest.raises(ValueError):
            simulate(ParticleEnsemble(np.zeros((2, 1))), params, SimConfig(), 0.01, observables=("m3",))

    def test_independent_of_worker_count(self, params, monkeypatch):
        monkeypatch.setenv("CHAOSKIT_THREADS", "4")
        init = ParticleEnsemble(np.linspace(-1, 1, 8)[:, None])
        cfg = SimConfig(dt=0.01, seed=42, n_replicas=7, record_every=5)
        serial = simulate(init, params, cfg, 0.2, observables=("m2", "energy"), pool=WorkerPool(1))
        parallel = simulate(init, params, cfg, 0.2, observables=("m2", "energy"), pool=WorkerPool(4))
        assert serial.records == parallel.records
        for a, b in zip(serial.final, parallel.final):
            assert np.array_equal(a.positions, b.positions)

    def test_records_on_interval_and_final_time(self, params):
        cfg = SimConfig(dt=0.01, seed=0, n_replicas=1, record_every=4)
        result = simulate(ParticleEnsemble(np.zeros((2, 1))), params, cfg, 0.1, observables=("m1",))
        times, _ = result.series("m1")
        assert times == pytest.approx([0.0, 0.04, 0.08, 0.1])

    def test_histogram_bins_partition_particles(self, params):
        edges = [-np.inf, -1.0, -0.5, 0.0, 0.5, 1.0, np.inf]
        hist = histogram_observables(edges)
        assert len(hist) == 6
        cfg = SimConfig(dt=0.01, seed=5, n_replicas=3, record_every=5)
        init = ParticleEnsemble(np.linspace(-1.35, 1.35, 10)[:, None])
        result = simulate(init, params, cfg, 0.1, observables=hist)
        totals = {}
        for r in result.records:
            totals[(r.time, r.replica)] = totals.get((r.time, r.replica), 0.0) + r.value
        assert len(totals) == 3 * 3
        assert list(totals.values()) == pytest.approx([1.0] * 9)
        first = [r.value for r in result.records if r.time == 0.0 and r.replica == 0]
        assert first == pytest.approx([0.2, 0.1, 0.2, 0.2, 0.1, 0.2])

    def test_second_moment_stable_under_step_halving(self):
        p = ModelParams(a=0.1, eps=0.01)
        init = ParticleEnsemble(np.linspace(-1.0, 1.0, 16)[:, None])
        coarse = simulate(init, p, SimConfig(dt=0.02, seed=11, n_replicas=256, record_every=5), 0.5)
        fine = simulate(init, p, SimConfig(dt=0.01, seed=11, n_replicas=256, record_every=10), 0.5)
        t_coarse, m2_coarse = coarse.series("m2")
        t_fine, m2_fine = fine.series("m2")
        assert t_coarse == pytest.approx(t_fine)
        assert m2_coarse[0] == pytest.approx(m2_fine[0])
        assert np.max(np.abs(np.asarray(m2_coarse) - np.asarray(m2_fine))) <= 0.2

    @pytest.mark.slow
    def test_second_moment_stays_bounded(self):
        p = ModelParams(a=0.1, eps=0.01)
        cfg = SimConfig(dt=0.01, seed=3, n_replicas=64, record_every=50)
        rng = replica_rng(3, 0)
        init = [ParticleEnsemble(rng.normal(size=(8, 1)) * 0.5) for _ in range(cfg.n_replicas)]
        result = simulate(init, p, cfg, 10.0, observables=("m2",))
        assert marginal_moment(result.final, 2) <= stationary_moment_bound(p) + 0.1
        _, m2 = result.series("m2")
        assert np.max(m2) <= stationary_moment_bound(p) + 0.1


class TestCoupling:
    def test_synchronous_equal_start_stays_equal(self):
        p = ModelParams(a=0.5, eps=0.0)
        rng = np.random.default_rng(2)
        start = ParticleEnsemble(rng.normal(size=(5, 1)))
        c = CoupledEnsemble(x=start, y=start, met=np.zeros(5, dtype=bool))
        for _ in range(50):
            c = coupled_step(c, DELTA_ZERO, p, 0.01, rng.standard_normal((5, 1)))
        assert np.array_equal(c.x.positions, c.y.positions)
        assert coupling_gap(c) == 0.0

    def test_reflection_mirrors_noise_in_one_dimension(self):
        p = ModelParams(a=1.0, eps=0.0)
        dt = 0.01
        c = CoupledEnsemble(
            x=ParticleEnsemble(np.array([[1.0]])),
            y=ParticleEnsemble(np.array([[0.0]])),
            met=np.array([False]),
            mode=CouplingMode.REFLECTION,
            merge_radius=1e-6,
        )
        out = coupled_step(c, DELTA_ZERO, p, dt, np.array([[0.1]]))
        kick = math.sqrt(2 * dt) * 0.1
        assert out.x.positions[0, 0] == pytest.approx(1.0 - 2.0 * dt + kick)
        assert out.y.positions[0, 0] == pytest.approx(-kick)
        assert not out.met[0]

    def test_merged_pairs_stay_merged(self):
        p = ModelParams(a=1.0, eps=0.1)
        rng = np.random.default_rng(4)
        start = ParticleEnsemble(rng.normal(size=(4, 1)))
        c = CoupledEnsemble(x=start, y=start, met=np.zeros(4, dtype=bool), mode="reflection")
        mu = DiscreteMeasure(points=[[0.3]], weights=[1.0])
        for _ in range(20):
            c = coupled_step(c, mu, p, 0.01, rng.standard_normal((4, 1)))
            assert c.met.all()
            assert np.array_equal(c.x.positions, c.y.positions)

    def test_reflection_is_isometry(self):
        rng = np.random.default_rng(8)
        e = rng.normal(size=(100, 3))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        u = rng.normal(size=(100, 3))
        mirrored = np.einsum("kij,kj->ki", reflection_matrix(e), u)
        np.testing.assert_allclose(np.linalg.norm(mirrored, axis=1), np.linalg.norm(u, axis=1), atol=1e-12)

    def test_coupling_gap_examples(self):
        x = np.array([[1.0], [0.0]])
        assert coupling_gap((x, x)) == 0.0
        assert coupling_gap((x, np.zeros((2, 1)))) == pytest.approx(0.5)

    def test_marginal_moment_examples(self):
        assert marginal_moment([ParticleEnsemble(np.zeros((3, 2)))], 2) == 0.0
        assert marginal_moment([ParticleEnsemble(np.array([[1.0], [-1.0]]))], 2) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            marginal_moment([], 2)


class TestReplicaStreams:
    def test_streams_are_reproducible(self):
        a = replica_rng(11, 3).standard_normal(5)
        b = replica_rng(11, 3).standard_normal(5)
        assert np.array_equal(a, b)

    def test_streams_differ_across_replicas(self):
        a = replica_rng(11, 3).standard_normal(5)
        b = replica_rng(11, 4).standard_normal(5)
        assert not np.array_equal(a, b)


@pytest.mark.slow
def test_langevin_matches_gibbs_law():
    p = ModelParams(a=1.0, eps=0.0)
    samples = langevin_sample(p, n_chains=50_000, t_burn=5.0, dt=1e-3, seed=9)[:, 0]
    gibbs = gibbs_density(p, 4.0, 4000)
    bins = np.linspace(-2.0, 2.0, 21)
    cdf = np.interp(bins, gibbs.edges, gibbs.cdf_at_edges())
    expected = np.diff(cdf)
    observed = np.histogram(samples, bins=bins)[0] / len(samples)
    tail = 1.0 - (cdf[-1] - cdf[0])
    assert 0.5 * (np.sum(np.abs(observed - expected)) + tail) <= 0.02
