"""Entropic optimal transport used to audit feasibility; never called by the solver.

:func:`entropic_w1` solves the discrete entropy-regularized transport
problem with log-domain Sinkhorn iterations. :func:`perturbation_transport_cost`
evaluates the transport-plus-entropy budget spent by a Gaussian
perturbation that keeps each anchor's ``x`` in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .core import EmpiricalJoint, Lebesgue, RngStream
from .perturbation import PerturbationFamily, _generator


class SinkhornError(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"Sinkhorn did not converge in {iterations} iterations "
                         f"(marginal residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(w) != len(atoms):
            raise ValueError(f"{len(atoms)} atoms but {len(w)} weights")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum():.15g}, not 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    @classmethod
    def point(cls, atom) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(atom, dtype=float)), np.ones(1))

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray

    @property
    def row_sums(self):
        return self.matrix.sum(axis=1)

    @property
    def col_sums(self):
        return self.matrix.sum(axis=0)

    def marginal_residual(self, a, b) -> float:
        return float(max(np.abs(self.row_sums - a).max(), np.abs(self.col_sums - b).max()))


def _plan_objective(P, C, log_ref, delta):
    mask = P > 0
    kl = np.sum(P[mask] * (np.log(P[mask]) - log_ref[mask]))
    return float(np.sum(P * C) + delta * kl)


def entropic_w1(mu: DiscreteMeasure, nu: DiscreteMeasure, delta: float, reference=None,
                cost=None, max_iters: int = 10_000, tol: float = 1e-12):
    """Entropy-regularized transport value ``<C, P> + delta * sum P log(P / eta)``.

    Parameters
    ----------
    mu, nu : DiscreteMeasure
        Source and target measures.
    delta : float
        Entropic weight, must be positive.
    reference : array_like, optional
        Positive reference masses ``eta`` of shape ``(len(mu), len(nu))``.
        Defaults to the product ``mu x nu``.
    cost : array_like, optional
        Cost matrix. Defaults to Euclidean distances between atoms.
    max_iters, tol : int, float
        Stop when the largest marginal violation drops below ``tol``.

    Returns
    -------
    value : float
    plan : TransportPlan
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    a, b = mu.weights, nu.weights
    C = cdist(mu.atoms, nu.atoms) if cost is None else np.asarray(cost, dtype=float)
    if C.shape != (len(a), len(b)):
        raise ValueError(f"cost has shape {C.shape}, expected {(len(a), len(b))}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    if reference is None:
        ref = np.outer(a, b)
    else:
        ref = np.asarray(reference, dtype=float)
        if ref.shape != C.shape or np.any(ref < 0):
            raise ValueError("reference must be a nonnegative matrix shaped like the cost")

    # work on the supports only; zero-weight atoms carry no mass
    rows, cols = a > 0, b > 0
    a_s, b_s = a[rows], b[cols]
    with np.errstate(divide="ignore"):
        log_ref = np.log(ref)
    log_k = log_ref[np.ix_(rows, cols)] - C[np.ix_(rows, cols)] / delta
    log_a, log_b = np.log(a_s), np.log(b_s)

    f = np.zeros(len(a_s))
    g = np.zeros(len(b_s))
    residual = np.inf
    for it in range(1, max_iters + 1):
        f = log_a - logsumexp(log_k + g[None, :], axis=1)
        g = log_b - logsumexp(log_k + f[:, None], axis=0)
        # columns are exact after the g update; check rows
        P_s = np.exp(log_k + f[:, None] + g[None, :])
        residual = float(np.abs(P_s.sum(axis=1) - a_s).max())
        if residual < tol:
            break
    else:
        raise SinkhornError(max_iters, residual)

    P = np.zeros_like(C)
    P[np.ix_(rows, cols)] = P_s
    value = _plan_objective(P, C, log_ref, delta)
    return value, TransportPlan(P)


@dataclass
class TransportCost:
    value: float
    transport: float
    entropy: float
    stderr: float


def perturbation_transport_cost(mu_star: EmpiricalJoint, family: PerturbationFamily,
                                delta: float, samples_per_atom: int, rng,
                                reference=None) -> TransportCost:
    """Budget spent by moving each ``(x_i, y_i)`` to ``(x_i, H x_i + A z)``.

    The transport part is a Monte Carlo average of the Euclidean move; the
    entropy part ``delta * E[log d pi / d eta]`` is exact.
    """
    if samples_per_atom < 1:
        raise ValueError("samples_per_atom must be at least 1")
    reference = Lebesgue() if reference is None else reference
    gen = rng.generator() if isinstance(rng, RngStream) else _generator(rng)
    z = gen.standard_normal((len(mu_star), samples_per_atom, family.dim))
    y = family.mean(mu_star.x)[:, None, :] + family.apply_scale(z)
    moves = np.linalg.norm(y - mu_star.y[:, None, :], axis=-1)
    per_atom = moves.mean(axis=1)
    transport = float(per_atom.mean())
    if samples_per_atom > 1:
        stderr = float(np.sqrt(np.sum(moves.var(axis=1, ddof=1) / samples_per_atom)) / len(mu_star))
    else:
        stderr = float("inf")
    entropy = float(delta * family.expected_log_ratio(reference))
    return TransportCost(transport + entropy, transport, entropy, stderr)
