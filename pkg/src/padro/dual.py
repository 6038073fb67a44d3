"""Monte Carlo evaluation of the weak-dual objective ``lambda*eps + mean_s h_s(lambda)``.

For a fixed perturbation parameter ``q`` the per-anchor value is

    h_s = E[ loss(x, y; g) - lambda * c(s, (x, y)) ] - lambda * delta * E[log d mu / d eta]

where ``y = H x + A(q) z``. The entropy part is evaluated in closed form
(it does not depend on the conditioning input), the rest by sampling.
The supremum over ``q`` is left to the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import DualProblem, EmpiricalJoint, GaussianReference, as_matrix
from .perturbation import PerturbationFamily, _generator


@dataclass(frozen=True)
class InnerIntegrandSample:
    """One integration point: anchor ``s``, drawn ``x`` and ``z``, and ``y = Hx + A z``."""

    s: tuple
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray


@dataclass
class DualEstimate:
    value: float
    grad_g: np.ndarray
    grad_q: np.ndarray
    per_anchor: np.ndarray
    stderr: float
    lam: float
    epsilon: float
    samples_per_anchor: int

    @property
    def n_anchors(self) -> int:
        return len(self.per_anchor)


def _check_lambda(lam):
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")


def inner_integrand(s, x, y, g, family: PerturbationFamily, lam: float, problem: DualProblem):
    """Pointwise integrand ``loss - lambda*c(s, r) - lambda*delta*log(d mu/d eta)(y)``."""
    _check_lambda(lam)
    xs, ys = (np.asarray(a, dtype=float) for a in s)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    loss = problem.loss(x, y, g)
    cost = problem.cost((xs, ys), (x, y))
    log_ratio = family.log_ratio(x, y, problem.reference)
    return loss - lam * cost - lam * problem.delta * log_ratio


def draw_integration_points(anchor_x, k, family, problem, gen, mu_star=None):
    """Draw ``(x, z)`` for one anchor according to the problem's coupling."""
    if problem.coupling == "marginal":
        if mu_star is None:
            raise ValueError("marginal coupling needs the empirical measure")
        idx = gen.integers(0, len(mu_star), size=k)
        x = mu_star.x[idx]
    else:
        x = np.broadcast_to(np.asarray(anchor_x, dtype=float), (k, len(anchor_x)))
    z = gen.standard_normal((k, family.dim))
    return x, z


def integrand_terms(g, family, lam, problem, xs, ys, x, z, with_grad=True):
    """Sampled part ``loss - lambda*c`` on a block of draws.

    ``xs, ys`` are anchors of shape ``(B, n)``, ``(B, m)``; ``x`` and ``z``
    have shape ``(B, k, .)``. With ``with_grad`` also returns the mean
    gradient in ``g`` and ``d f / d y`` per draw.
    """
    G = as_matrix(g)
    if problem.coupling == "anchor":
        # every draw shares its anchor's x; map the anchors only
        y = family.mean(xs)[:, None, :] + family.apply_scale(z)
    else:
        y = family.mean(x) + family.apply_scale(z)
    resid = problem.loss.residual(x, y, G)
    loss = np.sum(resid * resid, axis=-1)
    s = (xs[:, None, :], ys[:, None, :])
    cost = problem.cost(s, (x, y))
    f = loss - lam * cost
    if not with_grad:
        return f
    count = f.size
    n_out, m_in = G.shape
    grad_g = 2.0 * (resid.reshape(-1, n_out).T @ y.reshape(-1, m_in)) / count
    dy = problem.loss.grad_y(resid, G) - lam * problem.cost.grad_ry(s, (x, y), cost)
    return f, grad_g, dy


def entropy_term(family, lam, problem) -> float:
    return -lam * problem.delta * family.expected_log_ratio(problem.reference)


def estimate_h(s, g, family: PerturbationFamily, lam: float, problem: DualProblem,
               k: int, rng, mu_star: EmpiricalJoint | None = None, return_stderr=False):
    """Monte Carlo estimate of ``h_s(lambda)`` at the family's current parameter."""
    _check_lambda(lam)
    if k < 1:
        raise ValueError("k must be at least 1")
    xs, ys = (np.asarray(a, dtype=float) for a in s)
    gen = _generator(rng)
    x, z = draw_integration_points(xs, k, family, problem, gen, mu_star)
    f = integrand_terms(g, family, lam, problem, xs[None], ys[None], x[None], z[None],
                        with_grad=False)[0]
    value = float(np.mean(f) + entropy_term(family, lam, problem))
    if return_stderr:
        se = float(np.std(f, ddof=1) / np.sqrt(k)) if k > 1 else float("inf")
        return value, se
    return value


def dual_objective(g, family: PerturbationFamily, lam: float, problem: DualProblem,
                   mu_star: EmpiricalJoint, k: int, rng) -> DualEstimate:
    """Weak-dual value and its pathwise gradients under common random numbers.

    Anchor ``i`` draws from ``rng.child(i)``, so repeated calls with the
    same stream reuse the same draws bitwise.
    """
    _check_lambda(lam)
    if k < 1:
        raise ValueError("k must be at least 1")
    N = len(mu_star)
    xs_all, zs_all = [], []
    for i in range(N):
        x, z = draw_integration_points(mu_star.x[i], k, family, problem,
                                       rng.child(i).generator(), mu_star)
        xs_all.append(x)
        zs_all.append(z)
    x = np.stack(xs_all)
    z = np.stack(zs_all)
    f, grad_g, dy = integrand_terms(g, family, lam, problem, mu_star.x, mu_star.y, x, z)
    ent = entropy_term(family, lam, problem)
    per_anchor = f.mean(axis=1) + ent
    grad_q = family.parameter_gradient(dy, z, entropy_weight=-lam * problem.delta,
                                       reference=problem.reference)
    if k > 1:
        stderr = float(np.sqrt(np.sum(f.var(axis=1, ddof=1) / k)) / N)
    else:
        stderr = float("inf")
    return DualEstimate(
        value=float(lam * problem.epsilon + per_anchor.mean()),
        grad_g=grad_g,
        grad_q=grad_q,
        per_anchor=per_anchor,
        stderr=stderr,
        lam=float(lam),
        epsilon=float(problem.epsilon),
        samples_per_anchor=int(k),
    )


def sinkhorn_dual_reference(s, g, lam: float, problem: DualProblem, k: int, rng,
                            *, forward=None, stabilized: bool = True):
    """Unconstrained inner value ``lambda*delta*log E_eta[exp((loss - lambda*c)/(lambda*delta))]``.

    Samples ``r = (x_s, y)`` from the probability reference ``eta_s``
    (``N(H x_s, scale^2 Id)``). Without ``forward`` the reference is centred
    at the anchor's own ``y``. This is the value of the inner problem when
    every conditional is allowed, so it dominates :func:`estimate_h`.
    """
    if not lam > 0:
        raise ValueError("the unconstrained inner value is singular at lambda = 0")
    if k < 1:
        raise ValueError("k must be at least 1")
    ref = problem.reference
    if not isinstance(ref, GaussianReference):
        raise ValueError("needs a probability reference (GaussianReference)")
    xs, ys = (np.asarray(a, dtype=float) for a in s)
    center = ys if forward is None else np.asarray(forward, dtype=float) @ xs
    gen = _generator(rng)
    y = center + ref.scale * gen.standard_normal((k, len(center)))
    x = np.broadcast_to(xs, (k, len(xs)))
    expo = (problem.loss(x, y, g) - lam * problem.cost((xs, ys), (x, y))) / (lam * problem.delta)
    if stabilized:
        log_mean = logsumexp(expo) - np.log(k)
    else:
        log_mean = np.log(np.mean(np.exp(expo)))
    return float(lam * problem.delta * log_mean)
