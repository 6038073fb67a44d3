"""Shared types, the quadratic loss, the Euclidean ground cost and seeded streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array operands do not have compatible shapes."""


def as_matrix(g) -> np.ndarray:
    """Return the matrix behind ``g`` (a :class:`Reconstructor` or array-like)."""
    return np.asarray(getattr(g, "matrix", g), dtype=float)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream addressed by a ``(seed, stream)`` pair.

    Generators are Philox (counter based), so two streams with the same
    pair produce identical sequences no matter where or when they are
    created. Sub-streams are addressed with :meth:`child`.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64 and 0 <= int(self.stream) < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> "RngStream":
        words = [int(self.stream) & 0xFFFFFFFF, int(self.stream) >> 32]
        for i in ids:
            words.extend((int(i) & 0xFFFFFFFF, (int(i) >> 32) & 0xFFFFFFFF))
        lo, hi = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
        return RngStream(self.seed, int(lo) | (int(hi) << 32))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalJoint:
    """Uniform empirical measure on N pairs ``(x_i, y_i)``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if x.ndim != 2 or y.ndim != 2:
            raise DimensionError("samples must be stacked as (N, dim) arrays")
        if x.shape[0] != y.shape[0]:
            raise DimensionError(
                f"x_samples has {x.shape[0]} rows but y_samples has {y.shape[0]}")
        if x.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one atom")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_pairs(cls, xs: Sequence, ys: Sequence) -> "EmpiricalJoint":
        return cls(np.array(xs, dtype=float), np.array(ys, dtype=float))

    def __len__(self):
        return self.x.shape[0]

    @property
    def x_dim(self) -> int:
        return self.x.shape[1]

    @property
    def y_dim(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class Reconstructor:
    """Linear map ``g: Y -> X`` stored as an ``n x m`` matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, ndmin=2)
        if m.ndim != 2:
            raise DimensionError("reconstructor must be a 2-D matrix")
        if not np.all(np.isfinite(m)):
            raise ValueError("reconstructor has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __call__(self, y):
        return np.asarray(y, dtype=float) @ self.matrix.T

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class Lebesgue:
    """Lebesgue reference on Y; log-ratios become plain log-densities."""

    name: str = field(default="lebesgue", init=False)


@dataclass(frozen=True)
class GaussianReference:
    """Probability reference ``N(Hx, scale^2 Id)`` on Y, centred at the forward image."""

    scale: float = 1.0
    name: str = field(default="gaussian", init=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("reference scale must be positive")


# ---------------------------------------------------------------------------
# Loss and cost
# ---------------------------------------------------------------------------

def _check_loss_operands(x, y, g):
    g = as_matrix(g)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if g.ndim != 2:
        raise DimensionError("g must be a matrix")
    if y.shape[-1] != g.shape[1]:
        raise DimensionError(f"y has dimension {y.shape[-1]}, g expects {g.shape[1]}")
    if x.shape[-1] != g.shape[0]:
        raise DimensionError(f"x has dimension {x.shape[-1]}, g produces {g.shape[0]}")
    return x, y, g


def quadratic_loss(x, y, g):
    """Squared reconstruction error ``||g y - x||^2``.

    Works on single vectors or on stacks along the leading axes.
    """
    x, y, g = _check_loss_operands(x, y, g)
    r = y @ g.T - x
    return np.sum(r * r, axis=-1)


def loss_gradient_g(x, y, g) -> np.ndarray:
    """Gradient of :func:`quadratic_loss` with respect to the matrix ``g``."""
    x, y, g = _check_loss_operands(x, y, g)
    if x.ndim != 1 or y.ndim != 1:
        raise DimensionError("loss_gradient_g takes single vectors")
    return 2.0 * np.outer(g @ y - x, y)


def euclidean_pair_cost(s, r):
    """Unsquared Euclidean distance between pairs on the concatenation ``(x, y)``.

    ``s`` and ``r`` are ``(x, y)`` tuples; components may carry leading
    batch axes which broadcast against each other.
    """
    (sx, sy), (rx, ry) = s, r
    sx, sy, rx, ry = (np.asarray(a, dtype=float) for a in (sx, sy, rx, ry))
    if sx.shape[-1] != rx.shape[-1]:
        raise DimensionError(f"x parts differ: {sx.shape[-1]} vs {rx.shape[-1]}")
    if sy.shape[-1] != ry.shape[-1]:
        raise DimensionError(f"y parts differ: {sy.shape[-1]} vs {ry.shape[-1]}")
    dx = sx - rx
    dy = sy - ry
    return np.sqrt(np.sum(dx * dx, axis=-1) + np.sum(dy * dy, axis=-1))


def _flat_matmul(a, b):
    # stacked operands go through one 2-D product so BLAS sees a single call
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])


class QuadraticLoss:
    """Loss descriptor for ``||g y - x||^2`` with the derivatives the solver needs."""

    name = "quadratic"

    def __call__(self, x, y, g):
        return quadratic_loss(x, y, g)

    @staticmethod
    def residual(x, y, g):
        return _flat_matmul(y, as_matrix(g).T) - x

    @staticmethod
    def grad_y(residual, g):
        # d/dy ||g y - x||^2 = 2 g^T (g y - x)
        return 2.0 * _flat_matmul(residual, as_matrix(g))


class EuclideanCost:
    """Ground-cost descriptor wrapping :func:`euclidean_pair_cost`."""

    name = "euclidean"

    def __call__(self, s, r):
        return euclidean_pair_cost(s, r)

    @staticmethod
    def grad_ry(s, r, value):
        """Derivative of the cost in the y-part of ``r``; zero where the cost vanishes."""
        (_, sy), (_, ry) = s, r
        diff = np.asarray(ry, dtype=float) - np.asarray(sy, dtype=float)
        safe = np.where(value > 0, value, 1.0)
        return np.where((value > 0)[..., None], diff / safe[..., None], 0.0)


@dataclass(frozen=True)
class DualProblem:
    """Constants of the perturbation-aware entropic DRO problem.

    ``coupling`` selects how the inner expectation pairs an anchor with its
    perturbed sample: ``"anchor"`` keeps the anchor's own ``x`` and only
    perturbs ``y``; ``"marginal"`` redraws ``x`` from the empirical
    X-marginal.
    """

    epsilon: float
    delta: float
    cost: EuclideanCost = field(default_factory=EuclideanCost)
    loss: QuadraticLoss = field(default_factory=QuadraticLoss)
    reference: Lebesgue | GaussianReference = field(default_factory=Lebesgue)
    coupling: str = "anchor"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if self.coupling not in ("anchor", "marginal"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
