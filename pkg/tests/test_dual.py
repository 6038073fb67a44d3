import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from padro.core import DualProblem, EmpiricalJoint, GaussianReference, RngStream, quadratic_loss
from padro.dual import (dual_objective, entropy_term, estimate_h, inner_integrand,
                        sinkhorn_dual_reference)
from padro.perturbation import AnisotropicGaussianFamily, IsotropicGaussianFamily
from padro.validation import fd_gradients, random_instance


class TestInnerIntegrand:
    def test_zero_multiplier_is_the_loss(self, gen):
        x, y, g = gen.normal(size=2), gen.normal(size=2), gen.normal(size=(2, 2))
        s = (gen.normal(size=2), gen.normal(size=2))
        fam = IsotropicGaussianFamily(np.eye(2), 0.3)
        val = inner_integrand(s, x, y, g, fam, 0.0, DualProblem(0.1, 0.5))
        assert val == quadratic_loss(x, y, g)

    def test_all_terms_vanish(self):
        fam = IsotropicGaussianFamily([[1.0]], 1 / (2 * math.pi))
        x = np.array([0.4])
        val = inner_integrand((x, x), x, x, np.eye(1), fam, 1.0, DualProblem(0.0, 1.0))
        assert val == pytest.approx(0.0, abs=1e-15)

    def test_sum_of_terms(self, gen):
        H = gen.normal(size=(2, 2)) + 2 * np.eye(2)
        fam = AnisotropicGaussianFamily(H, [[0.7, 0.0], [0.1, 0.4]])
        problem = DualProblem(0.3, 0.2)
        s = (gen.normal(size=2), gen.normal(size=2))
        x, y, g = gen.normal(size=2), gen.normal(size=2), gen.normal(size=(2, 2))
        lam = 0.8
        expected = (np.sum((g @ y - x) ** 2)
                    - lam * math.sqrt(np.sum((s[0] - x) ** 2) + np.sum((s[1] - y) ** 2))
                    - lam * 0.2 * fam.log_density(x, y))
        assert inner_integrand(s, x, y, g, fam, lam, problem) == pytest.approx(expected, abs=1e-12)

    def test_negative_multiplier_rejected(self):
        fam = IsotropicGaussianFamily(np.eye(1), 1.0)
        with pytest.raises(ValueError, match="nonnegative"):
            inner_integrand(([0.0], [0.0]), [0.0], [0.0], np.eye(1), fam, -0.1,
                            DualProblem(0.0, 1.0))


class TestEstimateH:
    def test_exact_inverse_without_multiplier(self):
        H = np.array([[2.0, 0.0], [0.5, 1.0]])
        fam = IsotropicGaussianFamily(H, 1e-6)
        x = np.array([0.3, 0.6])
        val, se = estimate_h((x, H @ x), np.linalg.inv(H), fam, 0.0, DualProblem(0.0, 0.1),
                             2000, RngStream(1), return_stderr=True)
        assert abs(val) < 3 * se + 1e-5

    def test_entropy_contribution(self):
        fam = IsotropicGaussianFamily(np.eye(2), 1.0)
        val = entropy_term(fam, 1.0, DualProblem(0.0, 0.1))
        assert val == pytest.approx(0.28379, abs=1e-5)
        assert val == pytest.approx(0.1 * math.log(2 * math.pi * math.e))

    def test_agrees_with_quadrature(self):
        H, sigma, g, lam, delta = 1.5, 0.2, 0.6, 0.4, 0.1
        xs, ys = 0.5, 0.8
        fam = IsotropicGaussianFamily([[H]], sigma)
        problem = DualProblem(0.0, delta)
        sd = math.sqrt(sigma)

        def integrand(y):
            cost = math.hypot(0.0, y - ys)
            return norm.pdf(y, H * xs, sd) * ((g * y - xs) ** 2 - lam * cost)

        quad, _ = integrate.quad(integrand, H * xs - 12 * sd, H * xs + 12 * sd, limit=200)
        exact = quad + entropy_term(fam, lam, problem)
        val, se = estimate_h(([xs], [ys]), [[g]], fam, lam, problem, 20_000, RngStream(2),
                             return_stderr=True)
        assert abs(val - exact) < 3 * se

    def test_zero_samples_rejected(self):
        fam = IsotropicGaussianFamily(np.eye(1), 1.0)
        with pytest.raises(ValueError):
            estimate_h(([0.0], [0.0]), np.eye(1), fam, 1.0, DualProblem(0.0, 1.0), 0, RngStream(0))


class TestDualObjective:
    def _instance(self, gen):
        mu, problem, g, lam, fam = random_instance(gen)
        return mu, problem, g, lam, fam

    def test_empty_ball_is_mean_of_h(self, gen):
        mu, _, g, lam, fam = self._instance(gen)
        problem = DualProblem(0.0, 0.2)
        est = dual_objective(g, fam, lam, problem, mu, 8, RngStream(4))
        assert est.value == pytest.approx(est.per_anchor.mean(), abs=1e-14)

    def test_per_anchor_matches_estimate_h(self, gen):
        mu, problem, g, lam, fam = self._instance(gen)
        rng = RngStream(5)
        est = dual_objective(g, fam, lam, problem, mu, 8, rng)
        for i in range(len(mu)):
            h = estimate_h((mu.x[i], mu.y[i]), g, fam, lam, problem, 8, rng.child(i))
            assert est.per_anchor[i] == pytest.approx(h, abs=1e-12)

    def test_large_multiplier_monotone(self):
        x = np.random.default_rng(0).uniform(size=(10, 2))
        mu = EmpiricalJoint(x, x)
        fam = IsotropicGaussianFamily(np.eye(2), 1e-6)
        problem = DualProblem(0.5, 0.1)
        rng = RngStream(6)
        v = [dual_objective(np.eye(2), fam, lam, problem, mu, 32, rng).value
             for lam in (10.0, 20.0)]
        # near the floor the slope is epsilon plus the (negative) entropy term
        slope = 0.5 + entropy_term(fam, 1.0, problem)
        assert slope < 0 and v[1] < v[0]
        assert v[1] - v[0] == pytest.approx(10.0 * slope, abs=0.05)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_crn_differences(self, seed):
        gen = np.random.default_rng(seed)
        mu, problem, g, lam, fam = random_instance(gen)
        rng = RngStream(seed, 9)
        est = dual_objective(g, fam, lam, problem, mu, 16, rng)
        fd_g, fd_q = fd_gradients(g, fam, lam, problem, mu, 16, rng)
        assert np.linalg.norm(est.grad_g - fd_g) / np.linalg.norm(fd_g) < 1e-4
        assert np.linalg.norm(est.grad_q - fd_q) / np.linalg.norm(fd_q) < 1e-4

    def test_common_random_numbers_are_bitwise(self, gen):
        mu, problem, g, lam, fam = self._instance(gen)
        a = dual_objective(g, fam, lam, problem, mu, 8, RngStream(3))
        b = dual_objective(g, fam, lam, problem, mu, 8, RngStream(3))
        assert a.value == b.value

    def test_marginal_coupling_redraws_inputs(self, gen):
        mu, _, g, lam, fam = self._instance(gen)
        anchor = dual_objective(g, fam, lam, DualProblem(0.1, 0.2), mu, 8, RngStream(3))
        marginal = dual_objective(g, fam, lam, DualProblem(0.1, 0.2, coupling="marginal"), mu, 8,
                                  RngStream(3))
        assert anchor.value != marginal.value


class _ConstLoss:
    def __init__(self, c):
        self.c = c

    def __call__(self, x, y, g):
        return np.full(np.shape(y)[:-1], self.c)


class _ZeroCost:
    def __call__(self, s, r):
        return np.zeros(np.shape(r[1])[:-1])


class TestUnconstrainedReference:
    def test_constant_integrand(self):
        problem = DualProblem(0.0, 0.3, cost=_ZeroCost(), loss=_ConstLoss(2.5),
                              reference=GaussianReference(1.0))
        val = sinkhorn_dual_reference(([0.0], [0.0]), np.eye(1), 0.7, problem, 50, RngStream(0))
        assert val == pytest.approx(2.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_dominates_constrained_value(self, seed):
        gen = np.random.default_rng(seed)
        H = np.eye(2) * 1.5
        x = gen.uniform(size=2)
        s = (x, H @ x + 0.1 * gen.normal(size=2))
        problem = DualProblem(0.0, 0.5, reference=GaussianReference(0.8))
        g = np.eye(2) / 1.5 + 0.1 * gen.normal(size=(2, 2))
        lam = 1.0
        fam = IsotropicGaussianFamily(H, gen.uniform(0.05, 1.0))
        h, se = estimate_h(s, g, fam, lam, problem, 20_000, RngStream(seed, 1),
                           return_stderr=True)
        ref = sinkhorn_dual_reference(s, g, lam, problem, 200_000, RngStream(seed, 2), forward=H)
        assert ref - h >= -3 * se

    def test_stabilization_is_a_no_op_for_small_exponents(self):
        problem = DualProblem(0.0, 1.0, reference=GaussianReference(0.1))
        s = ([0.1, 0.2], [0.1, 0.2])
        args = (s, 0.1 * np.eye(2), 2.0, problem, 100, RngStream(1))
        a = sinkhorn_dual_reference(*args, stabilized=True)
        b = sinkhorn_dual_reference(*args, stabilized=False)
        assert a == pytest.approx(b, abs=1e-10)

    def test_zero_multiplier_rejected(self):
        problem = DualProblem(0.0, 1.0, reference=GaussianReference(1.0))
        with pytest.raises(ValueError):
            sinkhorn_dual_reference(([0.0], [0.0]), np.eye(1), 0.0, problem, 10, RngStream(0))
