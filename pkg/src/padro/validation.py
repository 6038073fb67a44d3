"""Self-checks run by ``padro validate``: gradients, entropy, weak duality, Sinkhorn, MLMC.

Each suite takes a random stream and an instance count and returns a dict
``{name, passed, measured, tolerance, instances, detail}``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize

from .core import DualProblem, EmpiricalJoint, RngStream
from .dual import dual_objective
from .optimizer import (BisectionConfig, BsmdConfig, MlmcConfig, bisect_lambda, level_gradient,
                        rt_mlmc_gradient)
from .ot_oracle import DiscreteMeasure, entropic_w1, perturbation_transport_cost
from .perturbation import AnisotropicGaussianFamily, IsotropicGaussianFamily

GRAD_TOL = 1e-4
ENTROPY_TOL = 1e-2
SINKHORN_TOL = 1e-6
MLMC_TOL = 1e-10


def _result(name, measured, tol, count, detail="", passed=None):
    if passed is None:
        passed = bool(np.isfinite(measured) and measured < tol)
    return {"name": name, "passed": bool(passed), "measured": float(measured),
            "tolerance": float(tol), "instances": int(count), "detail": detail}


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_family(gen, H, kind=None):
    d = H.shape[0]
    kind = kind or ("iso" if gen.random() < 0.5 else "aniso")
    if kind == "iso":
        return IsotropicGaussianFamily(H, gen.uniform(0.05, 2.0))
    L = np.tril(0.3 * gen.standard_normal((d, d)), -1) + np.diag(gen.uniform(0.3, 1.2, d))
    return AnisotropicGaussianFamily(H, L)


def random_instance(gen, n_atoms=6):
    d = int(gen.integers(1, 4))
    n = int(gen.integers(1, 4))
    H = gen.standard_normal((d, n)) + np.eye(d, n) * 2.0
    x = gen.uniform(size=(n_atoms, n))
    mu = EmpiricalJoint(x, x @ H.T + 0.1 * gen.standard_normal((n_atoms, d)))
    problem = DualProblem(epsilon=gen.uniform(0, 1), delta=gen.uniform(0.05, 0.5))
    g = 0.5 * gen.standard_normal((n, d))
    lam = gen.uniform(0.1, 2.0)
    return mu, problem, g, lam, random_family(gen, H)


def _rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def fd_gradients(g, family, lam, problem, mu, k, rng, h=1e-5):
    """Central differences of the dual value in every entry of ``g`` and ``q``."""
    def value(gm, fam):
        return dual_objective(gm, fam, lam, problem, mu, k, rng).value

    fd_g = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        e = np.zeros_like(g)
        e[idx] = h
        fd_g[idx] = (value(g + e, family) - value(g - e, family)) / (2 * h)
    q = family.params
    fd_q = np.zeros_like(q)
    for i in range(len(q)):
        e = np.zeros_like(q)
        e[i] = h
        fd_q[i] = (value(g, family.with_params(q + e))
                   - value(g, family.with_params(q - e))) / (2 * h)
    return fd_g, fd_q


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def gradient_suite(rng: RngStream, count: int):
    worst = 0.0
    for i in range(count):
        gen = rng.child(i).generator()
        mu, problem, g, lam, family = random_instance(gen)
        stream = rng.child(i, 1)
        est = dual_objective(g, family, lam, problem, mu, 16, stream)
        fd_g, fd_q = fd_gradients(g, family, lam, problem, mu, 16, stream)
        worst = max(worst, _rel_err(est.grad_g, fd_g), _rel_err(est.grad_q, fd_q))
    return _result("gradient", worst, GRAD_TOL, count,
                   "max relative error of pathwise vs central-difference gradients")


def entropy_suite(rng: RngStream, count: int = 1, draws: int = 1_000_000):
    worst = 0.0
    gen = rng.generator()
    anchor = IsotropicGaussianFamily(np.eye(1), 1.0 / (2 * math.pi * math.e))
    worst = max(worst, abs(anchor.negative_differential_entropy()))
    for i in range(max(count, 3)):
        d = 1 + i % 3
        H = np.eye(d)
        family = random_family(gen, H, "iso" if i % 2 == 0 else "aniso")
        x = gen.uniform(size=d)
        y, _ = family.sample_conditional(x, draws, gen)
        mc = float(np.mean(family.log_density(x, y)))
        worst = max(worst, abs(mc - family.negative_differential_entropy()))
    return _result("entropy", worst, ENTROPY_TOL, max(count, 3),
                   "closed-form negative entropy vs Monte Carlo and the zero-entropy anchor")


def brute_force_entropic_ot(C, a, b, delta, reference=None):
    """Minimize the entropic transport objective directly over the transport polytope."""
    n, m = C.shape
    eta = np.outer(a, b) if reference is None else reference
    log_eta = np.log(eta)

    def fun(p):
        P = np.maximum(p.reshape(n, m), 1e-300)
        val = np.sum(C * P) + delta * np.sum(P * (np.log(P) - log_eta))
        grad = C + delta * (np.log(P) - log_eta + 1.0)
        return val, grad.ravel()

    cons = [{"type": "eq", "fun": lambda p: p.reshape(n, m).sum(axis=1) - a,
             "jac": lambda p: np.kron(np.eye(n), np.ones(m))},
            {"type": "eq", "fun": lambda p: p.reshape(n, m).sum(axis=0)[:-1] - b[:-1],
             "jac": lambda p: np.tile(np.eye(m), n)[:-1]}]
    res = minimize(fun, np.outer(a, b).ravel(), jac=True, method="SLSQP", constraints=cons,
                   bounds=[(1e-14, 1.0)] * (n * m),
                   options={"ftol": 1e-15, "maxiter": 2000})
    return float(res.fun), res.x.reshape(n, m)


def sinkhorn_suite(rng: RngStream, count: int):
    worst = 0.0
    for i in range(count):
        gen = rng.child(i).generator()
        mu = DiscreteMeasure(gen.standard_normal((5, 2)), gen.dirichlet(np.ones(5)))
        nu = DiscreteMeasure(gen.standard_normal((5, 2)), gen.dirichlet(np.ones(5)))
        delta = gen.uniform(0.1, 1.0)
        val, _ = entropic_w1(mu, nu, delta)
        C = np.linalg.norm(mu.atoms[:, None] - nu.atoms[None], axis=-1)
        ref, _ = brute_force_entropic_ot(C, mu.weights, nu.weights, delta)
        worst = max(worst, abs(val - ref))
    a = DiscreteMeasure.point([0.0, 0.0])
    b = DiscreteMeasure.point([3.0, 4.0])
    worst = max(worst, abs(entropic_w1(a, a, 0.5)[0]), abs(entropic_w1(a, b, 0.5)[0] - 5.0))
    return _result("sinkhorn", worst, SINKHORN_TOL, count,
                   "Sinkhorn value vs direct constrained minimization; point-mass identities")


def mlmc_suite(rng: RngStream, count: int):
    worst = 0.0
    cfg = MlmcConfig()
    p = cfg.probabilities()
    for i in range(count):
        gen = rng.child(i).generator()
        mu, problem, g, lam, family = random_instance(gen)
        stream = rng.child(i, 1)
        deep = level_gradient(g, family, lam, problem, mu, cfg, stream, level=cfg.max_level)
        mean_g = np.zeros_like(deep.grad_g)
        mean_q = np.zeros_like(deep.grad_q)
        for lvl in range(cfg.max_level + 1):
            est = rt_mlmc_gradient(g, family, lam, problem, mu, cfg, stream, level=lvl)
            mean_g += p[lvl] * est.grad_g
            mean_q += p[lvl] * est.grad_q
        worst = max(worst, np.abs(mean_g - deep.grad_g).max(), np.abs(mean_q - deep.grad_q).max())
    return _result("mlmc", worst, MLMC_TOL, count,
                   "level-weighted RT-MLMC estimates vs deepest-level CRN gradient")


AUDIT_BSMD = BsmdConfig(iters=300, batch=16, final_samples=512, polish_restart=True,
                        q_geometry="log",
                        mlmc=MlmcConfig(max_level=4, base_samples=8))
AUDIT_BISECTION = BisectionConfig(lambda_lo=0.05, lambda_hi=3.0, tolerance=0.05, max_iters=4)


def weak_duality_audit(gen, rng: RngStream, n_candidates=40, samples=512):
    """Solve a random 2-D instance and compare the dual with feasible perturbed losses.

    Returns the smallest standardized margin ``(dual - primal) / se`` over
    candidates whose transport budget is within ``epsilon``, and the count
    of such candidates.
    """
    H = np.array([[2.0, 0.0], [0.0, 2.0]]) + 0.5 * gen.standard_normal((2, 2))
    x = gen.uniform(size=(20, 2))
    mu = EmpiricalJoint(x, x @ H.T)
    problem = DualProblem(epsilon=gen.uniform(0.3, 1.0), delta=0.1)
    # candidates have general covariance, so the sup runs over the full-covariance family
    family0 = AnisotropicGaussianFamily(H, math.sqrt(5.0) * np.eye(2))
    report = bisect_lambda(problem, mu, family0, AUDIT_BISECTION, AUDIT_BSMD, rng.child(0))
    g = report.g_opt.matrix
    dual = dual_objective(g, report.family, report.lambda_opt, problem, mu, samples,
                          rng.child(1))
    worst, feasible = math.inf, 0
    for j in range(n_candidates):
        cand = random_family(gen, H)
        cand = cand.with_params(cand.params * gen.uniform(0.01, 1.0))
        budget = perturbation_transport_cost(mu, cand, problem.delta, samples, rng.child(2, j))
        if budget.value > problem.epsilon:
            continue
        feasible += 1
        z = rng.child(3, j).generator().standard_normal((len(mu), samples, 2))
        y = cand.mean(mu.x)[:, None, :] + cand.apply_scale(z)
        losses = problem.loss(np.broadcast_to(mu.x[:, None, :], y.shape), y, g)
        primal = losses.mean()
        se_p = np.sqrt(np.sum(losses.var(axis=1, ddof=1) / samples)) / len(mu)
        se = math.hypot(dual.stderr, se_p)
        worst = min(worst, (dual.value - primal) / se)
    return worst, feasible


def weak_duality_suite(rng: RngStream, count: int):
    worst, total = math.inf, 0
    for i in range(count):
        margin, feasible = weak_duality_audit(rng.child(i).generator(), rng.child(i, 1))
        total += feasible
        worst = min(worst, margin)
    measured = -worst if math.isfinite(worst) else 0.0
    return _result("weak_duality", measured, 3.0, count,
                   f"largest standardized violation over {total} feasible perturbations "
                   "(passes below 3 standard errors)", passed=total > 0 and measured < 3.0)


SUITES = {
    "gradient": gradient_suite,
    "entropy": entropy_suite,
    "weak_duality": weak_duality_suite,
    "sinkhorn": sinkhorn_suite,
    "mlmc": mlmc_suite,
}
