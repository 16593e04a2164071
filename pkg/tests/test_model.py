import math

import numpy as np
import pytest

from errors import InvalidMeasureError, RegimeError
from limit import gaussian_density
from model import (
    ModelParams,
    a_star_frontier,
    grad_V,
    grad_W,
    lemma41_bounds,
    moment_envelope,
    mean_field_drift,
    one_sided_lipschitz,
    pair_drift,
    potential_V,
    radius_r_a,
    stationary_moment_bound,
    system_drift,
    system_energy,
    v_eps,
    wj_constants,
)
from transport import DiscreteMeasure


def params(a=1.0, eps=0.1, dim=1):
    return ModelParams(a=a, eps=eps, dim=dim)


def uniform_in_ball(rng, n, dim, radius):
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)


class TestModelParams:
    def test_rejects_nonpositive_depth(self):
        with pytest.raises(RegimeError):
            ModelParams(a=0.0, eps=0.0)

    def test_rejects_negative_eps(self):
        with pytest.raises(RegimeError):
            ModelParams(a=1.0, eps=-0.1)

    def test_rejects_bad_dimension(self):
        with pytest.raises(RegimeError):
            ModelParams(a=1.0, eps=0.0, dim=0)

    def test_admissible_in_small_well_regime(self):
        assert ModelParams(a=1e-4, eps=1e-5).admissible

    def test_not_admissible_for_strong_interaction(self):
        assert not ModelParams(a=0.1, eps=0.06).admissible

    def test_with_eps_keeps_depth(self):
        p = params().with_eps(0.3)
        assert (p.a, p.eps, p.dim) == (1.0, 0.3, 1)


class TestFields:
    def test_grad_v_examples(self):
        assert grad_V(np.array([1.0]), params()) == pytest.approx([2.0])
        assert grad_V(np.zeros(3), params(a=0.7, dim=3)) == pytest.approx(np.zeros(3))
        assert grad_V(np.array([1.0, 0.0]), params(a=0.5, dim=2)) == pytest.approx([3.0, 0.0])

    def test_grad_w_examples(self):
        assert grad_W(np.array([0.0])) == pytest.approx([0.0])
        assert grad_W(np.array([3.0])) == pytest.approx([-6.0])
        assert grad_W(np.array([1.0, -1.0])) == pytest.approx([-2.0, 2.0])

    def test_pair_drift_examples(self):
        p = params()
        assert pair_drift(np.zeros(1), np.zeros(1), p) == pytest.approx([0.0])
        assert pair_drift(np.array([1.0]), np.array([0.0]), p) == pytest.approx([-1.8])
        x, y = np.array([0.7]), np.array([-0.3])
        assert pair_drift(x, y, p.with_eps(0.0)) == pytest.approx(-grad_V(x, p))

    def test_mean_field_drift_single_atom(self):
        delta_two = DiscreteMeasure(points=[[2.0]], weights=[1.0])
        assert mean_field_drift(np.array([1.0]), delta_two, params()) == pytest.approx([-2.2])

    def test_mean_field_drift_centered(self):
        mu = gaussian_density(0.0, 1.0, 6.0, 512)
        assert mean_field_drift(np.zeros(1), mu, params(a=0.3, eps=0.2)) == pytest.approx([0.0], abs=1e-14)

    def test_mean_field_drift_matches_quadrature(self):
        p = params(a=0.4, eps=0.15)
        mu = gaussian_density(0.3, 0.8, 6.0, 600)
        z = mu.centers[:, None]
        for x in (-1.2, 0.0, 0.9):
            direct = mu.cell_width * np.sum(pair_drift(np.array([x]), z, p)[:, 0] * mu.values)
            assert mean_field_drift(np.array([x]), mu, p)[0] == pytest.approx(direct, abs=1e-12)

    def test_mean_field_drift_rejects_unnormalized(self):
        class HalfMass:
            def total_mass(self):
                return 0.5

            def mean(self):
                return np.zeros(1)

            def second_moment(self):
                return 1.0

        with pytest.raises(InvalidMeasureError):
            mean_field_drift(np.zeros(1), HalfMass(), params())

    def test_v_eps_closed_form(self):
        p = params(a=0.2, eps=0.1)
        mu = DiscreteMeasure(points=[[-1.0], [2.0]], weights=[0.5, 0.5])
        x = np.array([0.5])
        expected = potential_V(x, p) + p.eps * 0.5 * (-(0.5 + 1.0) ** 2 - (0.5 - 2.0) ** 2)
        assert v_eps(x, mu, p) == pytest.approx(expected)


class TestSystem:
    def test_origin_is_fixed(self):
        assert system_drift(np.zeros((4, 2)), params(dim=2)) == pytest.approx(np.zeros((4, 2)))
        assert system_energy(np.zeros((4, 2)), params(dim=2)) == pytest.approx(0.0)

    def test_two_particle_drift(self):
        drift = system_drift(np.array([[1.0], [0.0]]), params())
        assert drift[0, 0] == pytest.approx(-1.9)

    def test_two_particle_energy(self):
        assert system_energy(np.array([[1.0], [0.0]]), params()) == pytest.approx(-0.05)

    def test_self_term_included(self):
        x = np.array([[0.8]])
        assert system_drift(x, params()) == pytest.approx(-grad_V(x, params()))

    def test_drift_is_negative_energy_gradient(self):
        rng = np.random.default_rng(3)
        p = params(a=0.5, eps=0.2, dim=2)
        x = rng.normal(size=(5, 2))
        h = 1e-5
        grad = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += h
            down[idx] -= h
            grad[idx] = (system_energy(up, p) - system_energy(down, p)) / (2 * h)
        np.testing.assert_allclose(system_drift(x, p), -grad, rtol=1e-6, atol=1e-8)

    def test_batched_replicas(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 6, 1))
        batched = system_drift(x, params())
        for r in range(3):
            assert batched[r] == pytest.approx(system_drift(x[r], params()))


class TestBounds:
    def test_potential_bound_examples(self):
        assert lemma41_bounds(1.0, 0.0, params(a=0.6)).one_sided == pytest.approx(1.2)
        assert lemma41_bounds(1.0, 0.0, params(a=0.6)).convex_outside == pytest.approx(3.6)
        sup = lemma41_bounds(0.5, 1.01, params(a=0.1, eps=0.01)).sup_v_eps
        assert sup == pytest.approx(5.3527)

    def test_potential_bounds_flag_small_radius(self):
        bounds = lemma41_bounds(0.1, 1.0, params(a=0.6))
        assert not bounds.convex_ok
        assert bounds.convex_outside <= 0

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_one_sided_bound_on_random_pairs(self, dim):
        rng = np.random.default_rng(dim)
        p = params(a=0.7, eps=0.0, dim=dim)
        for _ in range(10):
            x = uniform_in_ball(rng, 100_000, dim, 10.0)
            y = uniform_in_ball(rng, 100_000, dim, 10.0)
            lhs = -np.sum((grad_V(x, p) - grad_V(y, p)) * (x - y), axis=1)
            assert np.all(lhs <= 2 * p.a * np.sum((x - y) ** 2, axis=1) + 1e-9)

    @pytest.mark.parametrize("dim", [1, 2])
    def test_convexity_outside_ball(self, dim):
        rng = np.random.default_rng(10 + dim)
        p = params(a=0.3, eps=0.0, dim=dim)
        R = 0.6
        x = rng.normal(size=(50_000, dim)) * 2
        y = rng.normal(size=(50_000, dim)) * 2
        far = np.maximum(np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1)) >= 2 * R
        x, y = x[far], y[far]
        lhs = np.sum((grad_V(x, p) - grad_V(y, p)) * (x - y), axis=1)
        bound = lemma41_bounds(R, 0.0, p).convex_outside * np.sum((x - y) ** 2, axis=1)
        assert np.all(lhs >= bound - 1e-9)

    def test_sup_bound_dominates_grid_maximum(self):
        p = params(a=0.1, eps=0.01)
        R, m2 = 0.5, 1.01
        mu = gaussian_density(0.0, m2, 8.0, 2048)
        z = np.linspace(-3 * R, 3 * R, 2001)[:, None]
        assert np.max(np.abs(v_eps(z, mu, p))) <= lemma41_bounds(R, m2, p).sup_v_eps

    def test_one_sided_lipschitz_of_system_drift(self):
        rng = np.random.default_rng(5)
        p = params(a=0.4, eps=0.1)
        x = rng.normal(size=(2000, 4, 1)) * 2
        y = rng.normal(size=(2000, 4, 1)) * 2
        lhs = np.sum((system_drift(x, p) - system_drift(y, p)) * (x - y), axis=(1, 2))
        assert np.all(lhs <= one_sided_lipschitz(p) * np.sum((x - y) ** 2, axis=(1, 2)) + 1e-9)

    def test_stationary_moment_bound(self):
        assert stationary_moment_bound(params(a=0.1, eps=0.01)) == pytest.approx(math.sqrt(0.11**2 + 1))

    def test_envelope_starts_above_initial_moment(self):
        p = params(a=0.1, eps=0.01)
        env = moment_envelope(4.0, np.array([0.0, 1.0, 100.0]), 0.5, p)
        assert env[0] >= 4.0
        assert env[-1] == pytest.approx(((0.11 + 0.5) ** 2 + 1) / 2.0)


class TestWjConstants:
    def test_radius_for_a_tenth(self):
        r = radius_r_a(0.1)
        r2 = ((0.1 / 6 + 0.1) + math.sqrt((0.1 / 6 + 0.1) ** 2 + 4 / 36)) / 2
        assert r == pytest.approx(math.sqrt(r2), abs=1e-9)
        assert r == pytest.approx(0.4847, abs=1e-4)
        assert r > math.sqrt(0.1 / 6)

    def test_c2_equals_four_a_at_the_radius(self):
        c = wj_constants(0.1, 0.0)
        assert c.c2 == pytest.approx(0.4, rel=1e-6)

    def test_regime_error(self):
        with pytest.raises(RegimeError):
            wj_constants(0.1, 0.05)

    def test_deep_well_is_infeasible(self):
        c = wj_constants(0.05, 0.001)
        assert c.c1 < 0
        assert not c.feasible

    def test_feasible_small_well(self):
        c = wj_constants(1e-4, 1e-5)
        assert c.feasible
        assert c.kappa_a == pytest.approx(4e-4)
        assert c.eps_a == pytest.approx(5e-5)
        assert c.kappa == pytest.approx(3.6e-4)
        assert c.c1 > c.kappa_a > 0
        assert c.c2 == pytest.approx(c.kappa_a, rel=1e-6)

    def test_eps_at_eps_a_is_boundary(self):
        a_star = a_star_frontier(0.0)
        a = 0.99 * a_star
        c = wj_constants(a, 0.0)
        assert c.kappa_a < 2 * a
        assert not wj_constants(a, c.eps_a).feasible

    def test_frontier_separates_feasibility(self):
        a_star = a_star_frontier(0.0)
        assert a_star is not None and 1e-4 < a_star < 0.05
        assert wj_constants(0.5 * a_star, 0.0).feasible
        assert not wj_constants(1.5 * a_star, 0.0).feasible

    def test_frontier_unbracketed(self):
        assert a_star_frontier(0.0, a_min=0.1, a_max=0.2) is None
