"""Gaussian Y|X perturbation families ``N(Hx, Sigma)`` used as the admissible set.

Both families are location-scale: a draw is ``y = H x + A(q) z`` with
``z`` standard normal, so Monte Carlo gradients with respect to ``q``
go through the scale matrix ``A`` (pathwise / reparametrisation).
"""

from __future__ import annotations

import abc
import math

import numpy as np
from scipy.linalg import solve_triangular

from .core import DimensionError, GaussianReference, Lebesgue, RngStream, _flat_matmul

SIGMA_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class AdmissibilityError(ValueError):
    """Parameter outside the admissible domain of a perturbation family."""


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or numpy Generator")


class PerturbationFamily(abc.ABC):
    """Parametrised family of conditionals ``x -> N(Hx, Sigma(q))``."""

    def __init__(self, forward, sigma_max: float, floor: float = SIGMA_FLOOR):
        H = np.array(forward, dtype=float, ndmin=2)
        if H.ndim != 2:
            raise DimensionError("forward operator must be a matrix")
        if not sigma_max > 0:
            raise AdmissibilityError("sigma_max must be positive")
        H.setflags(write=False)
        self.forward = H
        self.sigma_max = float(sigma_max)
        self.floor = float(floor)

    @property
    def dim(self) -> int:
        return self.forward.shape[0]

    # -- parametrisation ---------------------------------------------------
    @property
    @abc.abstractmethod
    def params(self) -> np.ndarray:
        """Parameter vector ``q``."""

    @abc.abstractmethod
    def with_params(self, q) -> "PerturbationFamily":
        """Family at parameter ``q``; raises if ``q`` is not admissible."""

    @abc.abstractmethod
    def project(self, q) -> np.ndarray:
        """Euclidean-style projection of ``q`` onto the admissible box."""

    @abc.abstractmethod
    def project_gradient(self, grad) -> np.ndarray:
        """Remove ascent components pointing out of the domain at active bounds."""

    @abc.abstractmethod
    def scale_mask(self) -> np.ndarray:
        """Boolean mask of the parameters that are positive scales."""

    @abc.abstractmethod
    def at_upper_bound(self) -> "PerturbationFamily":
        """Member of the family with the largest admissible scale."""

    def ascent_step(self, grad, lr: float, geometry: str = "log") -> "PerturbationFamily":
        """Projected ascent step on ``q``.

        With ``geometry="log"`` positive scale parameters move in log
        coordinates, ``s <- s * exp(lr * s * grad_s)``; the remaining
        parameters take plain Euclidean steps.
        """
        grad = self.project_gradient(grad)
        q = self.params
        if geometry == "euclidean":
            return self.with_params(self.project(q + lr * grad))
        if geometry != "log":
            raise ValueError(f"unknown step geometry {geometry!r}")
        mask = self.scale_mask()
        new = q + lr * grad
        # exponent capped so a single noisy step stays finite before projection
        new[mask] = q[mask] * np.exp(np.clip(lr * q[mask] * grad[mask], -20.0, 20.0))
        return self.with_params(self.project(new))

    @abc.abstractmethod
    def covariance(self) -> np.ndarray:
        ...

    @abc.abstractmethod
    def log_det_cov(self) -> float:
        ...

    @abc.abstractmethod
    def apply_scale(self, z) -> np.ndarray:
        """Map standard normal draws ``z`` (last axis ``d``) to ``A z``."""

    @abc.abstractmethod
    def pullback(self, dy, z) -> np.ndarray:
        """Mean of ``d f / d q`` given ``d f / d y`` for draws ``y = Hx + A z``."""

    @abc.abstractmethod
    def _mahalanobis(self, r) -> np.ndarray:
        ...

    @abc.abstractmethod
    def _log_det_grad(self) -> np.ndarray:
        """Gradient of ``log det Sigma`` with respect to ``q``."""

    @abc.abstractmethod
    def _trace_grad(self) -> np.ndarray:
        """Gradient of ``tr Sigma`` with respect to ``q``."""

    # -- measure-level operations -----------------------------------------
    def mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.forward.shape[1]:
            raise DimensionError(
                f"x has dimension {x.shape[-1]}, forward operator expects {self.forward.shape[1]}")
        return _flat_matmul(x, self.forward.T)

    def sample_conditional(self, x, k: int, rng):
        """Draw ``k`` samples of ``y ~ N(Hx, Sigma)`` per conditioning input.

        Returns ``(y, z)`` where ``z`` are the standard normal draws so that
        ``y = Hx + A z``; for ``x`` of shape ``(B, n)`` both have shape
        ``(B, k, d)``.
        """
        if k < 1:
            raise ValueError("sample count must be at least 1")
        mu = self.mean(x)
        z = _generator(rng).standard_normal(mu.shape[:-1] + (k, self.dim))
        return mu[..., None, :] + self.apply_scale(z), z

    def log_density(self, x, y):
        """``log N(Hx, Sigma)(y)``."""
        r = np.asarray(y, dtype=float) - self.mean(x)
        return -0.5 * (self.dim * LOG_2PI + self.log_det_cov() + self._mahalanobis(r))

    def log_ratio(self, x, y, reference=None):
        """Log Radon-Nikodym derivative of the family against ``reference`` at ``y``."""
        reference = reference or Lebesgue()
        out = self.log_density(x, y)
        if isinstance(reference, GaussianReference):
            r = np.asarray(y, dtype=float) - self.mean(x)
            tau2 = reference.scale ** 2
            out = out + 0.5 * (self.dim * math.log(2 * math.pi * tau2)
                               + np.sum(r * r, axis=-1) / tau2)
        return out

    def negative_differential_entropy(self) -> float:
        """``int log p dp`` for ``p = N(m, Sigma)``; does not depend on the mean."""
        return -0.5 * self.dim * (LOG_2PI + 1.0) - 0.5 * self.log_det_cov()

    def expected_log_ratio(self, reference=None) -> float:
        """Closed form of ``int log(d mu / d eta) d mu`` against the reference."""
        reference = reference or Lebesgue()
        if isinstance(reference, GaussianReference):
            tau2 = reference.scale ** 2
            d = self.dim
            return 0.5 * (np.trace(self.covariance()) / tau2 - d
                          + d * math.log(tau2) - self.log_det_cov())
        return self.negative_differential_entropy()

    def expected_log_ratio_grad(self, reference=None) -> np.ndarray:
        reference = reference or Lebesgue()
        if isinstance(reference, GaussianReference):
            return 0.5 * (self._trace_grad() / reference.scale ** 2 - self._log_det_grad())
        return -0.5 * self._log_det_grad()

    def parameter_gradient(self, dy, z, entropy_weight: float = 0.0, reference=None):
        """Gradient in ``q`` of ``E[f(Hx + A z)] + entropy_weight * E log(d mu/d eta)``.

        ``dy`` holds ``d f / d y`` at each draw and ``z`` the matching normal
        draws. The result is projected at active box constraints.
        """
        grad = self.pullback(dy, z)
        if entropy_weight:
            grad = grad + entropy_weight * self.expected_log_ratio_grad(reference)
        return self.project_gradient(grad)


class IsotropicGaussianFamily(PerturbationFamily):
    """``N(Hx, sigma Id)`` with variance ``sigma`` in ``(0, sigma_max]``."""

    def __init__(self, forward, sigma: float, sigma_max: float = 10.0,
                 floor: float = SIGMA_FLOOR):
        super().__init__(forward, sigma_max, floor)
        sigma = float(sigma)
        if not (0.0 < sigma <= self.sigma_max * (1 + 1e-12)):
            raise AdmissibilityError(f"sigma={sigma} outside (0, {self.sigma_max}]")
        self.sigma = sigma

    def __repr__(self):
        return f"IsotropicGaussianFamily(sigma={self.sigma:.6g}, sigma_max={self.sigma_max})"

    @property
    def params(self):
        return np.array([self.sigma])

    @property
    def std(self) -> float:
        return math.sqrt(self.sigma)

    def with_params(self, q):
        return IsotropicGaussianFamily(self.forward, float(np.ravel(q)[0]),
                                       self.sigma_max, self.floor)

    def project(self, q):
        return np.clip(np.ravel(q).astype(float), self.floor, self.sigma_max)

    def scale_mask(self):
        return np.array([True])

    def at_upper_bound(self):
        return self.with_params([self.sigma_max])

    def project_gradient(self, grad):
        grad = np.array(grad, dtype=float).ravel()
        if self.sigma >= self.sigma_max and grad[0] > 0:
            grad[0] = 0.0
        if self.sigma <= self.floor and grad[0] < 0:
            grad[0] = 0.0
        return grad

    def covariance(self):
        return self.sigma * np.eye(self.dim)

    def log_det_cov(self):
        return self.dim * math.log(self.sigma)

    def apply_scale(self, z):
        return math.sqrt(self.sigma) * np.asarray(z)

    def pullback(self, dy, z):
        # A = sqrt(sigma) Id  =>  dA/dsigma = Id / (2 sqrt(sigma))
        dy = np.asarray(dy)
        count = dy.size // self.dim
        return np.array([np.sum(dy * z) / count / (2.0 * math.sqrt(self.sigma))])

    def _mahalanobis(self, r):
        return np.sum(r * r, axis=-1) / self.sigma

    def _log_det_grad(self):
        return np.array([self.dim / self.sigma])

    def _trace_grad(self):
        return np.array([float(self.dim)])

    def as_anisotropic(self) -> "AnisotropicGaussianFamily":
        return AnisotropicGaussianFamily(self.forward, math.sqrt(self.sigma) * np.eye(self.dim),
                                         self.sigma_max, self.floor)


class AnisotropicGaussianFamily(PerturbationFamily):
    """``N(Hx, L L^T)`` with ``L`` lower triangular, positive diagonal.

    The parameter vector is the lower triangle of ``L`` in row-major
    order. The matrix bound ``Sigma <= M`` is read as ``lambda_max(Sigma) <= M``.
    """

    def __init__(self, forward, chol, sigma_max: float = 10.0, floor: float = SIGMA_FLOOR):
        super().__init__(forward, sigma_max, floor)
        L = np.array(chol, dtype=float, ndmin=2)
        d = self.dim
        if L.shape != (d, d):
            raise DimensionError(f"Cholesky factor must be {d}x{d}, got {L.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise AdmissibilityError("Cholesky factor must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise AdmissibilityError("Cholesky factor needs a strictly positive diagonal")
        if np.linalg.eigvalsh(L @ L.T)[-1] > self.sigma_max * (1 + 1e-9):
            raise AdmissibilityError("largest eigenvalue of Sigma exceeds sigma_max")
        L.setflags(write=False)
        self.chol = L
        self._tril = np.tril_indices(d)

    def __repr__(self):
        return f"AnisotropicGaussianFamily(Sigma={self.covariance().tolist()})"

    @property
    def params(self):
        return self.chol[self._tril].copy()

    def _unpack(self, q):
        L = np.zeros((self.dim, self.dim))
        L[self._tril] = np.ravel(q)
        return L

    def with_params(self, q):
        return AnisotropicGaussianFamily(self.forward, self._unpack(q), self.sigma_max, self.floor)

    def scale_mask(self):
        return self._tril[0] == self._tril[1]

    def at_upper_bound(self):
        return self.with_params(self.project(math.sqrt(self.sigma_max) * np.eye(self.dim)
                                             [self._tril]))

    def project(self, q):
        L = self._unpack(q)
        idx = np.arange(self.dim)
        L[idx, idx] = np.maximum(L[idx, idx], math.sqrt(self.floor))
        top = np.linalg.eigvalsh(L @ L.T)[-1]
        if top > self.sigma_max:
            L *= math.sqrt(self.sigma_max / top) * (1 - 1e-12)
        return L[self._tril]

    def _top_eig_grad(self):
        # d lambda_max / dL = 2 v v^T L (lower triangle)
        w, V = np.linalg.eigh(self.covariance())
        v = V[:, -1]
        return (2.0 * np.outer(v, v) @ self.chol)[self._tril], w[-1]

    def project_gradient(self, grad):
        grad = np.array(grad, dtype=float).ravel()
        n, top = self._top_eig_grad()
        if top >= self.sigma_max * (1 - 1e-9):
            out = grad @ n
            if out > 0:
                grad = grad - out / (n @ n) * n
        diag_pos = np.flatnonzero(self._tril[0] == self._tril[1])
        at_floor = np.diag(self.chol) <= math.sqrt(self.floor) * (1 + 1e-12)
        for k, active in zip(diag_pos, at_floor):
            if active and grad[k] < 0:
                grad[k] = 0.0
        return grad

    def covariance(self):
        return self.chol @ self.chol.T

    def log_det_cov(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def apply_scale(self, z):
        return np.asarray(z) @ self.chol.T

    def pullback(self, dy, z):
        dy = np.asarray(dy)
        count = dy.size // self.dim
        gA = np.tensordot(dy.reshape(-1, self.dim), np.asarray(z).reshape(-1, self.dim),
                          axes=(0, 0)) / count
        return gA[self._tril]

    def _mahalanobis(self, r):
        flat = np.asarray(r, dtype=float).reshape(-1, self.dim)
        w = solve_triangular(self.chol, flat.T, lower=True)
        return np.sum(w * w, axis=0).reshape(np.shape(r)[:-1])

    def _log_det_grad(self):
        G = np.zeros((self.dim, self.dim))
        idx = np.arange(self.dim)
        G[idx, idx] = 2.0 / np.diag(self.chol)
        return G[self._tril]

    def _trace_grad(self):
        return (2.0 * self.chol)[self._tril]
