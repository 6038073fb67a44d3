import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import linprog
from scipy.spatial.distance import cdist
from scipy.stats import norm

from padro.core import EmpiricalJoint, RngStream
from padro.ot_oracle import (DiscreteMeasure, SinkhornError, entropic_w1,
                             perturbation_transport_cost)
from padro.perturbation import IsotropicGaussianFamily


def _random_measure(gen, n, dim=2):
    return DiscreteMeasure(gen.normal(size=(n, dim)), gen.dirichlet(np.ones(n)))


def _convex_solve(C, a, b, delta):
    """Entropic transport by a conic solver, independent of the Sinkhorn iterations."""
    P = cp.Variable(C.shape, nonneg=True)
    log_eta = np.log(np.outer(a, b))
    obj = cp.sum(cp.multiply(C, P)) - delta * cp.sum(cp.entr(P)) - delta * cp.sum(
        cp.multiply(log_eta, P))
    prob = cp.Problem(cp.Minimize(obj), [cp.sum(P, axis=1) == a, cp.sum(P, axis=0) == b])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value


def _lp_value(C, a, b):
    n, m = C.shape
    A_eq = np.vstack([np.kron(np.eye(n), np.ones(m)), np.tile(np.eye(m), n)])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs")
    return res.fun


class TestEntropicW1:
    def test_identical_point_masses(self):
        a = DiscreteMeasure.point([1.0, -2.0])
        val, plan = entropic_w1(a, a, 0.3)
        assert val == 0.0
        np.testing.assert_array_equal(plan.matrix, [[1.0]])

    def test_distinct_point_masses(self):
        val, _ = entropic_w1(DiscreteMeasure.point([0, 0]), DiscreteMeasure.point([3, 4]), 0.3)
        assert val == 5.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_convex_solver(self, seed):
        gen = np.random.default_rng(seed)
        mu, nu = _random_measure(gen, 5), _random_measure(gen, 5)
        delta = gen.uniform(0.1, 1.0)
        val, _ = entropic_w1(mu, nu, delta)
        ref = _convex_solve(cdist(mu.atoms, nu.atoms), mu.weights, nu.weights, delta)
        assert abs(val - ref) < 1e-6

    @given(st.integers(0, 10_000), st.floats(0.05, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_plan_marginals(self, seed, delta):
        gen = np.random.default_rng(seed)
        mu, nu = _random_measure(gen, 4), _random_measure(gen, 6)
        _, plan = entropic_w1(mu, nu, delta)
        assert plan.marginal_residual(mu.weights, nu.weights) < 1e-8

    @pytest.mark.parametrize("seed", range(4))
    def test_decreases_to_lp_value(self, seed):
        gen = np.random.default_rng(100 + seed)
        mu, nu = _random_measure(gen, 4), _random_measure(gen, 4)
        lp = _lp_value(cdist(mu.atoms, nu.atoms), mu.weights, nu.weights)
        vals = [entropic_w1(mu, nu, d, max_iters=200_000, tol=1e-10)[0]
                for d in (1.0, 0.3, 0.1, 0.03, 0.01)]
        assert np.all(np.diff(vals) <= 1e-9)
        assert all(v >= lp - 1e-9 for v in vals)
        assert vals[-1] - lp < 0.05

    def test_non_convergence_reports_residual(self, gen):
        mu, nu = _random_measure(gen, 5), _random_measure(gen, 5)
        with pytest.raises(SinkhornError) as info:
            entropic_w1(mu, nu, 0.01, max_iters=1, tol=1e-15)
        assert info.value.residual > 0

    def test_rejects_unnormalized_weights(self):
        with pytest.raises(ValueError):
            DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])


class TestPerturbationCost:
    def test_degenerate_limit(self):
        x = np.random.default_rng(0).uniform(size=(8, 2))
        H = 2 * np.eye(2)
        fam = IsotropicGaussianFamily(H, 1e-10, floor=1e-12)
        cost = perturbation_transport_cost(EmpiricalJoint(x, x @ H.T), fam, 0.1, 64, RngStream(0))
        assert cost.transport < 1e-4
        assert cost.entropy == pytest.approx(0.1 * fam.negative_differential_entropy())

    def test_one_dimensional_quadrature(self):
        H, sigma, delta = 1.5, 0.3, 0.2
        x = np.array([[0.2], [0.7]])
        y = np.array([[0.5], [0.9]])
        fam = IsotropicGaussianFamily([[H]], sigma)
        sd = math.sqrt(sigma)
        expected = np.mean([integrate.quad(lambda v: abs(v - yi) * norm.pdf(v, H * xi, sd),
                                           H * xi - 12 * sd, H * xi + 12 * sd, limit=200)[0]
                            for xi, yi in zip(x[:, 0], y[:, 0])])
        cost = perturbation_transport_cost(EmpiricalJoint(x, y), fam, delta, 50_000, RngStream(1))
        assert abs(cost.transport - expected) < 3 * cost.stderr
        assert cost.value == pytest.approx(cost.transport + delta * (
            -0.5 * (math.log(2 * math.pi * math.e) + math.log(sigma))))

    def test_transport_grows_with_scale(self):
        x = np.random.default_rng(1).uniform(size=(10, 2))
        mu = EmpiricalJoint(x, x)
        costs = [perturbation_transport_cost(mu, IsotropicGaussianFamily(np.eye(2), s), 0.1, 256,
                                             RngStream(5)).transport for s in (0.1, 0.5, 1.0)]
        assert costs[0] <= costs[1] <= costs[2]
