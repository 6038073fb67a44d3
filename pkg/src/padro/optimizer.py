"""Outer search over the multiplier and alternating stochastic ascent/descent in (q, g).

For each trial ``lambda`` the inner solver alternates a projected ascent
step on the perturbation parameter ``q`` with a descent step on the
reconstructor ``g``. Gradients come from a randomized-truncation
multilevel Monte Carlo estimator. The multiplier is located by a
three-point interval search on the inner-solved objective.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DualProblem, EmpiricalJoint, Reconstructor, RngStream, as_matrix
from .dual import DualEstimate, dual_objective, entropy_term, integrand_terms
from .perturbation import PerturbationFamily

FINAL_STREAM = 0x5EED_F1A1


class SolverDivergence(RuntimeError):
    def __init__(self, lam, iteration, value):
        super().__init__(f"objective {value:.3g} exceeded guard at iteration {iteration} "
                         f"(lambda={lam:.6g})")
        self.lam = lam
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class MlmcConfig:
    max_level: int = 6
    level_decay: float = 1.5
    base_samples: int = 8

    def __post_init__(self):
        if self.max_level < 0 or self.base_samples < 1:
            raise ValueError("max_level must be >= 0 and base_samples >= 1")
        p = self.probabilities()
        if not (np.all(p > 0) and abs(p.sum() - 1) < 1e-12):
            raise ValueError("invalid level distribution")

    def probabilities(self) -> np.ndarray:
        w = 2.0 ** (-self.level_decay * np.arange(self.max_level + 1))
        return w / w.sum()

    def samples(self, level: int) -> int:
        return self.base_samples * 2 ** level


@dataclass(frozen=True)
class BsmdConfig:
    lr_g: float = 0.05
    lr_q: float = 0.05
    iters: int = 2000
    batch: int = 32
    step_decay: bool = True
    final_samples: int = 256
    trace_every: int = 1
    q_geometry: str = "euclidean"
    polish_iters: int = 100
    polish_restart: bool = False
    mlmc: MlmcConfig = field(default_factory=MlmcConfig)
    divergence_guard: float = 1e8

    def __post_init__(self):
        if not (self.lr_g >= 0 and self.lr_q >= 0):
            raise ValueError("learning rates must be nonnegative")
        if self.iters < 0 or self.batch < 1:
            raise ValueError("iters must be >= 0 and batch >= 1")
        if self.q_geometry not in ("log", "euclidean"):
            raise ValueError(f"unknown q_geometry {self.q_geometry!r}")

    def step_sizes(self, t: int):
        scale = 1.0 / math.sqrt(t) if self.step_decay else 1.0
        return self.lr_g * scale, self.lr_q * scale


@dataclass(frozen=True)
class BisectionConfig:
    lambda_lo: float = 0.05
    lambda_hi: float = 0.5
    tolerance: float = 0.01
    max_iters: int = 12

    def __post_init__(self):
        if not 0 < self.lambda_lo < self.lambda_hi:
            raise ValueError("need 0 < lambda_lo < lambda_hi")


@dataclass
class Trace:
    iteration: list = field(default_factory=list)
    g: list = field(default_factory=list)
    q: list = field(default_factory=list)
    objective: list = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def append(self, it, g, q, obj):
        self.iteration.append(it)
        self.g.append(g)
        self.q.append(q)
        self.objective.append(obj)


@dataclass
class MlmcGradient:
    grad_g: np.ndarray
    grad_q: np.ndarray
    level: int
    value: float


@dataclass
class BsmdResult:
    g: np.ndarray
    family: PerturbationFamily
    value: float
    stderr: float
    trace: Trace
    final: DualEstimate


@dataclass
class SolveReport:
    g_opt: Reconstructor
    family: PerturbationFamily
    lambda_opt: float
    value: float
    stderr: float
    trace: Trace
    history: list
    diagnostics: dict

    @property
    def q_opt(self):
        return self.family.params


# ---------------------------------------------------------------------------
# Gradient estimation
# ---------------------------------------------------------------------------

def _draw_block(mu_star, anchors, m, family, problem, rng: RngStream):
    # draws are laid out sample-major so a prefix of length m' is the m'-sample draw
    z = rng.child(2).generator().standard_normal((m, len(anchors), family.dim))
    if problem.coupling == "marginal":
        idx = rng.child(3).generator().integers(0, len(mu_star), size=(m, len(anchors)))
        x = mu_star.x[idx]
    else:
        x = np.broadcast_to(mu_star.x[anchors], (m, len(anchors), mu_star.x_dim))
    return np.swapaxes(x, 0, 1), np.swapaxes(z, 0, 1)


def _level_gradient(g, family, lam, problem, xs, ys, x, z):
    f, grad_g, dy = integrand_terms(g, family, lam, problem, xs, ys, x, z)
    return f.mean(), grad_g, family.pullback(dy, z)


def rt_mlmc_gradient(g, family: PerturbationFamily, lam: float, problem: DualProblem,
                     mu_star: EmpiricalJoint, cfg: MlmcConfig, rng: RngStream,
                     anchors=None, level: int | None = None) -> MlmcGradient:
    """Randomized-truncation MLMC gradient of the dual objective.

    Draws a level ``l`` with probability ``p_l`` and returns
    ``(G_l - G_{l-1}) / p_l`` where ``G_l`` uses the first ``n0 * 2**l``
    draws of a shared sequence (``G_{-1} = 0``). The closed-form entropy
    gradient has no sampling error and is added outside the estimator.
    Pass ``level`` to force a level (used for exhaustive checks).
    """
    p = cfg.probabilities()
    if anchors is None:
        anchors = np.arange(len(mu_star))
    anchors = np.asarray(anchors)
    if level is None:
        level = int(rng.child(1).generator().choice(len(p), p=p))
    if not 0 <= level <= cfg.max_level:
        raise ValueError(f"level {level} outside 0..{cfg.max_level}")
    m = cfg.samples(level)
    x, z = _draw_block(mu_star, anchors, m, family, problem, rng)
    xs, ys = mu_star.x[anchors], mu_star.y[anchors]
    val, gg, gq = _level_gradient(g, family, lam, problem, xs, ys, x, z)
    if level > 0:
        h = cfg.samples(level - 1)
        _, gg_c, gq_c = _level_gradient(g, family, lam, problem, xs, ys, x[:, :h], z[:, :h])
        gg = gg - gg_c
        gq = gq - gq_c
    gg = gg / p[level]
    gq = gq / p[level] - lam * problem.delta * family.expected_log_ratio_grad(problem.reference)
    value = lam * problem.epsilon + val + entropy_term(family, lam, problem)
    return MlmcGradient(gg, gq, level, float(value))


def level_gradient(g, family: PerturbationFamily, lam: float, problem: DualProblem,
                   mu_star: EmpiricalJoint, cfg: MlmcConfig, rng: RngStream, anchors=None,
                   level: int = 0) -> MlmcGradient:
    """Plain CRN gradient with ``n0 * 2**level`` draws per anchor on the shared sequence."""
    anchors = np.arange(len(mu_star)) if anchors is None else np.asarray(anchors)
    x, z = _draw_block(mu_star, anchors, cfg.samples(level), family, problem, rng)
    val, gg, gq = _level_gradient(g, family, lam, problem, mu_star.x[anchors],
                                  mu_star.y[anchors], x, z)
    gq = gq - lam * problem.delta * family.expected_log_ratio_grad(problem.reference)
    value = lam * problem.epsilon + val + entropy_term(family, lam, problem)
    return MlmcGradient(gg, gq, level, float(value))


# ---------------------------------------------------------------------------
# Inner solver
# ---------------------------------------------------------------------------

def _trace_g(g):
    return g.ravel().copy() if g.size <= 64 else np.array([np.linalg.norm(g)])


RESTART_SCALES = (1.0, 1e-1, 1e-2, 1e-3)


def polish_q(g, family: PerturbationFamily, lam: float, problem: DualProblem,
             mu_star: EmpiricalJoint, k: int, rng: RngStream, iters: int,
             geometry: str = "log", step: float = 1.0, restart: bool = False):
    """Deterministic ascent on ``q`` at fixed ``g`` over one common-random-number sample.

    Steps that do not increase the objective are halved and retried, so the
    returned value never falls below the starting one. The step never grows,
    which keeps the ascent on the current local maximum. With ``restart``
    further ascents start from the largest admissible scale and from that
    scale shrunk by powers of ten, and the best result is kept. The inner
    objective can have several local maxima in the scale, so this is what
    makes the value a usable stand-in for the supremum.
    """
    if restart:
        top = family.at_upper_bound()
        starts = [family] + [top.with_params(top.project(top.params * f))
                             for f in RESTART_SCALES]
        runs = [polish_q(g, s, lam, problem, mu_star, k, rng, iters, geometry, step)
                for s in starts]
        return max(runs, key=lambda r: r[1].value)
    best = dual_objective(g, family, lam, problem, mu_star, k, rng)
    for _ in range(iters):
        if step < 1e-10:
            break
        cand = family.ascent_step(best.grad_q, step, geometry)
        est = dual_objective(g, cand, lam, problem, mu_star, k, rng)
        if est.value > best.value:
            family, best = cand, est
        else:
            step *= 0.5
    return family, best


def bsmd_solve(lam: float, g0, family0: PerturbationFamily, problem: DualProblem,
               mu_star: EmpiricalJoint, cfg: BsmdConfig, rng: RngStream) -> BsmdResult:
    """Alternating projected ascent on ``q`` and descent on ``g`` at fixed ``lambda``.

    Each iteration draws an anchor mini-batch and an MLMC level; ``q`` is
    updated first, then ``g`` is updated with a gradient evaluated at the
    new ``q`` on the same draws. The returned value is a large-sample
    estimate of the objective on a stream shared by every ``lambda``.
    """
    g = np.array(as_matrix(g0), dtype=float)
    family = family0
    N = len(mu_star)
    batch = min(cfg.batch, N)
    trace = Trace()
    for t in range(1, cfg.iters + 1):
        step = rng.child(t)
        anchors = step.child(0).generator().choice(N, size=batch, replace=False)
        lr_g, lr_q = cfg.step_sizes(t)

        est = rt_mlmc_gradient(g, family, lam, problem, mu_star, cfg.mlmc, step, anchors)
        if lr_q:
            family = family.ascent_step(est.grad_q, lr_q, cfg.q_geometry)
            est = rt_mlmc_gradient(g, family, lam, problem, mu_star, cfg.mlmc, step,
                                   anchors, level=est.level)
        if not np.isfinite(est.value) or abs(est.value) > cfg.divergence_guard:
            raise SolverDivergence(lam, t, est.value)
        g = g - lr_g * est.grad_g
        if not np.all(np.isfinite(g)):
            raise SolverDivergence(lam, t, float("inf"))
        if t % cfg.trace_every == 0:
            trace.append(t, _trace_g(g), family.params.copy(), est.value)

    final_rng = RngStream(rng.seed, FINAL_STREAM)
    family, final = polish_q(g, family, lam, problem, mu_star, cfg.final_samples, final_rng,
                             cfg.polish_iters, cfg.q_geometry, step=cfg.lr_q or 1.0,
                             restart=cfg.polish_restart)
    if not np.isfinite(final.value) or abs(final.value) > cfg.divergence_guard:
        raise SolverDivergence(lam, cfg.iters, final.value)
    return BsmdResult(g, family, final.value, final.stderr, trace, final)


# ---------------------------------------------------------------------------
# Outer search
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    x: float
    value: float
    history: list
    boundary: str | None
    payload: object = None


def trisection_search(objective: Callable, lo: float, hi: float, tol: float,
                      max_iters: int) -> SearchResult:
    """Minimise a noisy unimodal function by comparing lower, middle and upper values.

    ``objective(x)`` returns either a float or ``(value, payload)``. The
    interval shrinks toward whichever of the three points is smallest; the
    best point seen is returned. ``boundary`` is ``"lower"``/``"upper"``
    when the minimiser sits at an end of the original interval.
    """
    cache = {}
    history = []
    best = {"x": None, "v": math.inf, "payload": None}

    def f(x):
        if x not in cache:
            out = objective(x)
            v, payload = out if isinstance(out, tuple) else (out, None)
            cache[x] = float(v)
            history.append((float(x), float(v)))
            if v < best["v"]:
                best.update(x=x, v=float(v), payload=payload)
        return cache[x]

    lo0, hi0 = lo, hi
    for _ in range(max_iters):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        vals = [f(lo), f(mid), f(hi)]
        k = int(np.argmin(vals))
        if k == 0:
            hi = mid
        elif k == 2:
            lo = mid
        else:
            lo, hi = 0.5 * (lo + mid), 0.5 * (mid + hi)
    f(lo), f(hi), f(0.5 * (lo + hi))

    boundary = None
    span = max(tol, 1e-12 * (hi0 - lo0))
    if best["x"] - lo0 < span:
        boundary = "lower"
    elif hi0 - best["x"] < span:
        boundary = "upper"
    return SearchResult(best["x"], best["v"], history, boundary, best["payload"])


def default_init(forward, family: PerturbationFamily) -> np.ndarray:
    """Scaled adjoint ``H^T / ||H||_F^2`` as the starting reconstructor."""
    H = np.asarray(forward, dtype=float)
    return H.T / np.sum(H * H)


def bisect_lambda(problem: DualProblem, mu_star: EmpiricalJoint, family0: PerturbationFamily,
                  bisect_cfg: BisectionConfig, bsmd_cfg: BsmdConfig, rng: RngStream,
                  g0=None, objective: Callable | None = None) -> SolveReport:
    """Locate the multiplier and return the inner solution there.

    Every trial ``lambda`` is solved by :func:`bsmd_solve`, warm-started from
    the best ``(g, q)`` found so far. ``objective`` may replace the inner
    solver with any ``lambda -> value`` map (used for testing the search).
    """
    start = time.perf_counter()
    state = {"g": default_init(family0.forward, family0) if g0 is None else as_matrix(g0),
             "family": family0}

    if objective is None:
        def objective(lam):
            res = bsmd_solve(lam, state["g"], state["family"], problem, mu_star, bsmd_cfg, rng)
            return res.value, res

    def tracked(lam):
        out = objective(lam)
        if isinstance(out, tuple) and isinstance(out[1], BsmdResult):
            if out[0] <= tracked.best:
                tracked.best = out[0]
                state["g"], state["family"] = out[1].g, out[1].family
        return out
    tracked.best = math.inf

    res = trisection_search(tracked, bisect_cfg.lambda_lo, bisect_cfg.lambda_hi,
                            bisect_cfg.tolerance, bisect_cfg.max_iters)
    inner = res.payload if isinstance(res.payload, BsmdResult) else None
    diagnostics = {
        "boundary": res.boundary,
        "evaluations": len(res.history),
        "runtime_s": time.perf_counter() - start,
    }
    if inner is None:
        return SolveReport(Reconstructor(state["g"]), state["family"], res.x, res.value,
                           float("nan"), Trace(), res.history, diagnostics)
    return SolveReport(Reconstructor(inner.g), inner.family, res.x, inner.value, inner.stderr,
                       inner.trace, res.history, diagnostics)
