import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from padro.core import (DimensionError, DualProblem, EmpiricalJoint, Reconstructor, RngStream,
                        euclidean_pair_cost, loss_gradient_g, quadratic_loss)

finite = st.floats(-10, 10, allow_nan=False)


class TestQuadraticLoss:
    def test_identity_reconstructs_exactly(self):
        assert quadratic_loss([1, 2], [1, 2], np.eye(2)) == 0.0

    def test_zero_map_returns_squared_norm(self):
        assert quadratic_loss([3, 4], [7.0, -1.0], np.zeros((2, 2))) == 25.0

    def test_hand_expansion(self):
        assert quadratic_loss([0, 0], [1, 1], 2 * np.eye(2)) == pytest.approx(8.0)

    def test_dimension_mismatch_names_operand(self):
        with pytest.raises(DimensionError, match="y has dimension 3"):
            quadratic_loss([0, 0], [1, 1, 1], np.eye(2))
        with pytest.raises(DimensionError, match="x has dimension 3"):
            quadratic_loss([0, 0, 0], [1, 1], np.eye(2))

    def test_batched_matches_loop(self, gen):
        x, y, g = gen.normal(size=(5, 3)), gen.normal(size=(5, 2)), gen.normal(size=(3, 2))
        loop = [np.sum((g @ y[i] - x[i]) ** 2) for i in range(5)]
        np.testing.assert_allclose(quadratic_loss(x, y, g), loop, rtol=1e-13)

    @given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite),
           arrays(float, (2, 2), elements=finite))
    def test_nonnegative(self, x, y, g):
        assert quadratic_loss(x, y, g) >= 0


class TestLossGradient:
    def test_zero_residual(self):
        np.testing.assert_array_equal(loss_gradient_g([1, 2], [1, 2], np.eye(2)), np.zeros((2, 2)))

    def test_hand_differentiation(self):
        np.testing.assert_allclose(loss_gradient_g([0, 0], [1, 0], np.eye(2)),
                                   [[2, 0], [0, 0]])

    def test_central_differences(self, gen):
        x, y, g = gen.normal(size=3), gen.normal(size=2), gen.normal(size=(3, 2))
        fd = np.zeros_like(g)
        h = 1e-5
        for idx in np.ndindex(g.shape):
            e = np.zeros_like(g)
            e[idx] = h
            fd[idx] = (quadratic_loss(x, y, g + e) - quadratic_loss(x, y, g - e)) / (2 * h)
        grad = loss_gradient_g(x, y, g)
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


class TestPairCost:
    def test_identical_pairs(self):
        s = ([1.0, 2.0], [3.0])
        assert euclidean_pair_cost(s, s) == 0.0

    def test_three_four_five(self):
        assert euclidean_pair_cost(((0, 0), (0, 0)), ((3, 0), (0, 4))) == 5.0

    def test_direct_norm(self):
        assert euclidean_pair_cost(((1, 1), (1, 1)), ((2, 1), (1, 2))) == pytest.approx(math.sqrt(2))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            euclidean_pair_cost(((0, 0), (0,)), ((0, 0), (0, 0)))

    @given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite),
           arrays(float, 4, elements=finite))
    def test_metric_axioms(self, a, b, c):
        s, r, t = (a[:2], a[2:]), (b[:2], b[2:]), (c[:2], c[2:])
        d_sr = euclidean_pair_cost(s, r)
        assert d_sr == pytest.approx(euclidean_pair_cost(r, s))
        assert d_sr <= euclidean_pair_cost(s, t) + euclidean_pair_cost(t, r) + 1e-9


class TestTypes:
    def test_empirical_joint_rejects_row_mismatch(self):
        with pytest.raises(DimensionError, match="3 rows"):
            EmpiricalJoint(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_empirical_joint_is_read_only(self):
        mu = EmpiricalJoint.from_pairs([[0, 1]], [[1, 2]])
        with pytest.raises(ValueError):
            mu.x[0, 0] = 5.0
        assert len(mu) == 1 and mu.x_dim == 2 and mu.y_dim == 2

    def test_reconstructor_applies_to_rows(self):
        g = Reconstructor([[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_array_equal(g([[1.0, 1.0], [2.0, 0.0]]), [[3.0, 1.0], [2.0, 0.0]])

    def test_reconstructor_rejects_nan(self):
        with pytest.raises(ValueError):
            Reconstructor([[np.nan]])

    def test_problem_validates_constants(self):
        with pytest.raises(ValueError):
            DualProblem(epsilon=-1.0, delta=0.1)
        with pytest.raises(ValueError):
            DualProblem(epsilon=0.0, delta=0.0)
        with pytest.raises(ValueError):
            DualProblem(epsilon=0.0, delta=1.0, coupling="other")


class TestRngStream:
    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**32))
    @settings(max_examples=25)
    def test_same_address_same_draws(self, seed, i):
        a = RngStream(seed).child(i).generator().standard_normal(4)
        b = RngStream(seed).child(i).generator().standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_children_differ(self):
        a = RngStream(7).child(0).generator().standard_normal(8)
        b = RngStream(7).child(1).generator().standard_normal(8)
        assert not np.allclose(a, b)

    def test_rejects_out_of_range_seed(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            RngStream(2**64)
