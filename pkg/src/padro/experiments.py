"""Experiment configuration and runners behind the command-line interface."""

from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .core import DualProblem, EmpiricalJoint, GaussianReference, Lebesgue, RngStream
from .data import (NoiseModel, load_mnist_idx, make_dataset, mnist_paths,
                   sample_uniform_square)
from .inverse_models import (ConvolutionOperator, fit_tikhonov_lambda, gaussian_kernel_3x3,
                             laplacian_neumann, mse, ssim, tikhonov_inverse)
from .optimizer import (BisectionConfig, BsmdConfig, MlmcConfig, SolverDivergence,
                        bisect_lambda)
from .ot_oracle import perturbation_transport_cost
from .perturbation import AnisotropicGaussianFamily, IsotropicGaussianFamily, PerturbationFamily

EXPERIMENTS = ("invert-iso", "invert-aniso", "deconv", "validate")


class ConfigError(ValueError):
    """Invalid configuration or missing input files (exit code 2)."""


class ValidationFailure(RuntimeError):
    """At least one validation suite failed (exit code 1)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "epsilon": {"type": "number", "minimum": 0},
        "delta": _POS,
        "sigma_max": _POS,
        "initial_sigma": _POS,
        "n_samples": {"type": "integer", "minimum": 1},
        "forward": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "coupling": {"enum": ["anchor", "marginal"]},
        "reference_scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "final_samples": {"type": "integer", "minimum": 2},
        "bsmd": {
            "type": "object", "additionalProperties": False,
            "properties": {"lr_g": {"type": "number", "minimum": 0},
                           "lr_q": {"type": "number", "minimum": 0},
                           "iters": _INT, "batch": {"type": "integer", "minimum": 1},
                           "step_decay": {"type": "boolean"},
                           "trace_every": {"type": "integer", "minimum": 1},
                           "divergence_guard": _POS, "polish_iters": _INT,
                           "polish_restart": {"type": "boolean"},
                           "q_geometry": {"enum": ["log", "euclidean"]}},
        },
        "mlmc": {
            "type": "object", "additionalProperties": False,
            "properties": {"max_level": _INT, "level_decay": _POS,
                           "base_samples": {"type": "integer", "minimum": 1}},
        },
        "bisection": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambda_lo": _POS, "lambda_hi": _POS, "tolerance": _POS,
                           "max_iters": _INT},
        },
        "noise_grid": {
            "type": "array",
            "items": {"type": "array", "prefixItems": [{"enum": ["gaussian", "poisson"]}, _POS],
                      "minItems": 2, "maxItems": 2},
        },
        "bandwidth": _POS,
        "train_images": {"type": "integer", "minimum": 1},
        "test_images": {"type": "integer", "minimum": 1},
        "full": {"type": "boolean"},
        "sample_digit": {"type": "integer", "minimum": 0, "maximum": 9},
        "tikhonov_interval": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "tikhonov_tol": _POS,
        "mnist": {"type": ["string", "null"]},
        "out": {"type": "string"},
        "suites": {"type": "array", "items": {"enum": ["gradient", "entropy", "weak_duality",
                                                       "sinkhorn", "mlmc"]}},
        "inject_fault": {"type": ["string", "null"], "enum": [None, "entropy_gradient_sign"]},
        "instances": {"type": "object", "additionalProperties": {"type": "integer",
                                                                 "minimum": 1}},
    },
}

_COMMON = {
    "seed": 0,
    "epsilon": 0.001,
    "delta": 0.1,
    "coupling": "anchor",
    "reference_scale": None,
    "final_samples": 256,
    "out": "runs",
    "mnist": None,
}

DEFAULTS = {
    "invert-iso": {
        **_COMMON,
        "n_samples": 400,
        "forward": [[2.0, 0.0], [0.0, 2.0]],
        "sigma_max": 10.0,
        "initial_sigma": 0.01,
        "bsmd": {"lr_g": 0.05, "lr_q": 0.05, "iters": 2000, "batch": 32, "step_decay": True,
                 "trace_every": 1},
        "mlmc": {"max_level": 6, "level_decay": 1.5, "base_samples": 8},
        "bisection": {"lambda_lo": 0.35, "lambda_hi": 0.45, "tolerance": 0.01, "max_iters": 12},
    },
    "invert-aniso": {
        **_COMMON,
        "n_samples": 600,
        "forward": [[5.0, 1.0], [1.0, 2.0]],
        "sigma_max": 10.0,
        "initial_sigma": 0.01,
        "bsmd": {"lr_g": 0.05, "lr_q": 0.05, "iters": 2000, "batch": 32, "step_decay": True,
                 "trace_every": 1},
        "mlmc": {"max_level": 6, "level_decay": 1.5, "base_samples": 8},
        "bisection": {"lambda_lo": 0.35, "lambda_hi": 0.45, "tolerance": 0.01, "max_iters": 12},
    },
    "deconv": {
        **_COMMON,
        "sigma_max": 0.0025,
        "initial_sigma": 0.00125,
        "final_samples": 8,
        "bandwidth": 1.0,
        "train_images": 150,
        "test_images": 1000,
        "full": False,
        "sample_digit": 7,
        "noise_grid": [["gaussian", 0.01], ["gaussian", 0.05], ["gaussian", 0.1],
                       ["poisson", 0.01], ["poisson", 0.05], ["poisson", 0.1]],
        "bsmd": {"lr_g": 0.02, "lr_q": 0.02, "iters": 2000, "batch": 16, "step_decay": True,
                 "trace_every": 10},
        "mlmc": {"max_level": 3, "level_decay": 1.5, "base_samples": 4},
        "bisection": {"lambda_lo": 0.05, "lambda_hi": 0.4, "tolerance": 1.0, "max_iters": 0},
        "tikhonov_interval": [1e-6, 1e2],
        "tikhonov_tol": 0.05,
    },
    "validate": {
        **_COMMON,
        "suites": ["gradient", "entropy", "weak_duality", "sinkhorn", "mlmc"],
        "inject_fault": None,
        "instances": {"gradient": 50, "weak_duality": 20, "sinkhorn": 10, "mlmc": 5},
    },
}

FULL_TEST_IMAGES = 10_000


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def build_config(experiment: str, file_values: dict | None = None,
                 flag_values: dict | None = None) -> dict:
    """Resolve a configuration with precedence flags > file > defaults."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    file_values = dict(file_values or {})
    if file_values.get("experiment", experiment) != experiment:
        raise ConfigError(f"config file is for {file_values['experiment']!r}, "
                          f"not {experiment!r}")
    cfg = _merge(DEFAULTS[experiment], file_values)
    cfg = _merge(cfg, {k: v for k, v in (flag_values or {}).items() if v is not None})
    cfg["experiment"] = experiment
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc.message}") from exc
    b = cfg.get("bisection")
    if b and not 0 < b["lambda_lo"] < b["lambda_hi"]:
        raise ConfigError("bisection needs 0 < lambda_lo < lambda_hi")
    if cfg.get("mnist") and not Path(cfg["mnist"]).is_dir():
        raise ConfigError(f"MNIST directory {cfg['mnist']} does not exist")
    return cfg


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _problem(cfg) -> DualProblem:
    scale = cfg.get("reference_scale")
    ref = Lebesgue() if scale is None else GaussianReference(scale)
    return DualProblem(cfg["epsilon"], cfg["delta"], reference=ref, coupling=cfg["coupling"])


def _solver_configs(cfg):
    mlmc = MlmcConfig(**cfg["mlmc"])
    bsmd = BsmdConfig(**cfg["bsmd"], final_samples=cfg["final_samples"], mlmc=mlmc)
    return BisectionConfig(**cfg["bisection"]), bsmd


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def write_manifest(out: Path, cfg: dict, files: list):
    digest = hashlib.sha256()
    entries = {}
    for name in sorted(files):
        blob = (out / name).read_bytes()
        entries[name] = hashlib.sha256(blob).hexdigest()
        digest.update(name.encode() + b"\0" + blob)
    write_json(out / "manifest.json", {
        "config": cfg,
        "seeds": cfg.get("seeds") or [cfg["seed"]],
        "files": entries,
        "content_hash": digest.hexdigest(),
        "package_version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    })


def _prepare_out(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Matrix inversion
# ---------------------------------------------------------------------------

@dataclass
class InversionResult:
    report: object
    mu_star: EmpiricalJoint
    forward: np.ndarray
    summary: dict


def _trace_rows(report, family: PerturbationFamily):
    rows = []
    tr = report.trace
    for it, g, q, obj in zip(tr.iteration, tr.g, tr.q, tr.objective):
        cov = family.with_params(q).covariance()
        rows.append([it, *g, *cov.ravel(), obj])
    return rows


def solve_inversion(cfg, family_kind: str, seed: int | None = None) -> InversionResult:
    """Build the synthetic dataset and run the multiplier search."""
    seed = cfg["seed"] if seed is None else seed
    H = np.asarray(cfg["forward"], dtype=float)
    if H.ndim != 2:
        raise ConfigError("forward must be a matrix")
    root = RngStream(seed)
    xs = sample_uniform_square(cfg["n_samples"], H.shape[1], root.child(0))
    mu = make_dataset(xs, H)
    if family_kind == "iso":
        family = IsotropicGaussianFamily(H, cfg["initial_sigma"], sigma_max=cfg["sigma_max"])
    else:
        chol = math.sqrt(cfg["initial_sigma"]) * np.eye(H.shape[0])
        family = AnisotropicGaussianFamily(H, chol, sigma_max=cfg["sigma_max"])
    bis, bsmd = _solver_configs(cfg)
    problem = _problem(cfg)
    report = bisect_lambda(problem, mu, family, bis, bsmd, root.child(1))
    budget = perturbation_transport_cost(mu, report.family, problem.delta, cfg["final_samples"],
                                         root.child(2), problem.reference)
    g = report.g_opt.matrix
    summary = {
        "seed": seed,
        "g_opt": g,
        "lambda_opt": report.lambda_opt,
        "dual_value": report.value,
        "dual_stderr": report.stderr,
        "q_opt": report.q_opt,
        "covariance_opt": report.family.covariance(),
        "transport_budget": {"value": budget.value, "transport": budget.transport,
                             "entropy": budget.entropy, "stderr": budget.stderr},
        "lambda_history": report.history,
        "diagnostics": report.diagnostics,
    }
    if family_kind == "iso":
        var = float(report.family.params[0])
        summary["sigma_variance"] = var
        summary["sigma_opt"] = math.sqrt(var)
    return InversionResult(report, mu, H, summary)


def _axis_angle(u, v) -> float:
    """Angle in degrees between the lines spanned by ``u`` and ``v``."""
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.degrees(math.acos(min(1.0, c)))


def anisotropy_summary(cov, H) -> dict:
    w, V = np.linalg.eigh(cov)
    hw, hV = np.linalg.eigh(0.5 * (H + H.T)) if np.allclose(H, H.T) else (None, None)
    if hw is None:
        # non-symmetric operator: principal directions from the singular vectors
        U, s, _ = np.linalg.svd(H)
        top = U[:, 0]
        h_info = {"singular_values": s, "left_singular_vectors": U}
    else:
        top = hV[:, np.argmax(np.abs(hw))]
        h_info = {"eigenvalues": hw, "eigenvectors": hV}
    principal = V[:, -1]
    return {
        "eigenvalues": w,
        "eigenvectors": V,
        "principal_axis": principal,
        "forward_top_eigenvector": top,
        "axis_angle_deg": _axis_angle(principal, top),
        "forward": h_info,
    }


def _run_inversion(cfg, family_kind):
    out = _prepare_out(cfg)
    start = time.perf_counter()
    res = solve_inversion(cfg, family_kind)
    d = res.forward.shape[0]
    n = res.mu_star.x_dim
    gcols = [f"g_{i}{j}" for i in range(n) for j in range(d)]
    if res.report.trace.g and len(res.report.trace.g[0]) != n * d:
        gcols = ["g_norm"]
    scols = [f"sigma_{i}{j}" for i in range(d) for j in range(d)]
    rows = _trace_rows(res.report, res.report.family)
    if family_kind == "iso":
        header = ["iteration", *gcols, "sigma_variance", "sigma_std", "objective"]
        rows = [[r[0], *r[1:1 + len(gcols)], r[1 + len(gcols)],
                 math.sqrt(r[1 + len(gcols)]), r[-1]] for r in rows]
    else:
        header = ["iteration", *gcols, *scols, "objective"]
    write_csv(out / "trace.csv", header, rows)
    files = ["trace.csv", "summary.json"]
    summary = dict(res.summary)
    if family_kind == "aniso":
        summary["anisotropy"] = anisotropy_summary(res.report.family.covariance(), res.forward)
        gen = RngStream(cfg["seed"]).child(3).generator()
        pick = gen.choice(len(res.mu_star), size=min(200, len(res.mu_star)), replace=False)
        x = res.mu_star.x[pick]
        y, _ = res.report.family.sample_conditional(x, 1, gen)
        write_csv(out / "samples.csv", [*(f"x_{i}" for i in range(n)),
                                        *(f"mean_{i}" for i in range(d)),
                                        *(f"y_{i}" for i in range(d))],
                  np.hstack([x, res.report.family.mean(x), y[:, 0]]))
        files.append("samples.csv")
    summary["runtime_s"] = time.perf_counter() - start
    write_json(out / "summary.json", summary)
    write_manifest(out, cfg, files)
    return summary


def run_invert_iso(cfg) -> dict:
    return _run_inversion(cfg, "iso")


def run_invert_aniso(cfg) -> dict:
    return _run_inversion(cfg, "aniso")


# ---------------------------------------------------------------------------
# Deconvolution
# ---------------------------------------------------------------------------

def _load_mnist(cfg):
    if not cfg.get("mnist"):
        raise ConfigError("deconv needs --mnist DIR holding train-images-idx3-ubyte[.gz] "
                          "and t10k-images-idx3-ubyte[.gz] (see `fetch-mnist`)")
    out = {}
    for split in ("train", "t10k"):
        images, labels = mnist_paths(cfg["mnist"], split)
        if images is None:
            raise ConfigError(f"{cfg['mnist']} has no {split}-images-idx3-ubyte[.gz]")
        try:
            out[split] = load_mnist_idx(images, labels)
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return out


def run_deconv(cfg) -> dict:
    """Train the robust deconvolution operator and compare it with Tikhonov."""
    out = _prepare_out(cfg)
    start = time.perf_counter()
    data = _load_mnist(cfg)
    root = RngStream(cfg["seed"])
    train_imgs, _ = data["train"]
    test_imgs, test_labels = data["t10k"]
    n_test = FULL_TEST_IMAGES if cfg["full"] else cfg["test_images"]
    n_test = min(n_test, len(test_imgs))
    # both splits may be stored grouped by digit, so draw seeded subsets
    tr = root.child(10).generator().permutation(len(train_imgs))[:cfg["train_images"]]
    te = root.child(11).generator().permutation(len(test_imgs))[:n_test]
    x_train = train_imgs[tr].reshape(len(tr), -1)
    x_test = test_imgs[te].reshape(len(te), -1)
    labels = None if test_labels is None else test_labels[te]

    op = ConvolutionOperator(gaussian_kernel_3x3(cfg["bandwidth"]))
    H = op.matrix()
    mu = make_dataset(x_train, op)
    family = IsotropicGaussianFamily(H, cfg["initial_sigma"], sigma_max=cfg["sigma_max"])
    bis, bsmd = _solver_configs(cfg)
    report = bisect_lambda(_problem(cfg), mu, family, bis, bsmd, root.child(1))
    robust = report.g_opt

    L = laplacian_neumann(28)
    clean = op(x_test)
    settings = [("none", None)] + [tuple(s) for s in cfg["noise_grid"]]
    rows, recon_rows, tikhonov_fits = [], [], {}
    digit_idx = 0
    if labels is not None and np.any(labels == cfg["sample_digit"]):
        digit_idx = int(np.flatnonzero(labels == cfg["sample_digit"])[0])
    recon_rows.append(["truth", "none", "", *x_test[digit_idx]])
    for k, (kind, sigma) in enumerate(settings):
        noise = NoiseModel(kind, sigma)
        y = noise.apply(clean, root.child(20, k).generator())
        if kind == "none":
            fit = None
            tik = tikhonov_inverse(op, L, cfg["tikhonov_interval"][0])
        else:
            fit = fit_tikhonov_lambda(op, L, x_test, y, tuple(cfg["tikhonov_interval"]),
                                      cfg["tikhonov_tol"])
            tik = tikhonov_inverse(op, L, fit.lambda_reg)
            tikhonov_fits[str(noise)] = {"lambda_reg": fit.lambda_reg, "mse": fit.mse,
                                         "boundary": fit.boundary}
        for method, g in (("padro", robust), ("tikhonov", tik)):
            rec = g(y)
            rows.append([method, kind, "" if sigma is None else sigma, mse(rec, x_test),
                         ssim(rec.reshape(-1, 28, 28), x_test.reshape(-1, 28, 28))])
            recon_rows.append([method, kind, "" if sigma is None else sigma, *rec[digit_idx]])
    write_csv(out / "table.csv", ["method", "noise", "sigma", "mse", "ssim"], rows)
    write_csv(out / "reconstructions.csv",
              ["method", "noise", "sigma", *(f"p{i}" for i in range(784))], recon_rows)
    tr_rows = [[it, g[0], q[0], obj] for it, g, q, obj in
               zip(report.trace.iteration, report.trace.g, report.trace.q, report.trace.objective)]
    write_csv(out / "trace.csv", ["iteration", "g_norm", "sigma_variance", "objective"], tr_rows)
    summary = {
        "seed": cfg["seed"],
        "lambda_opt": report.lambda_opt,
        "dual_value": report.value,
        "sigma_variance": float(report.family.params[0]),
        "test_images": n_test,
        "sample_index": int(te[digit_idx]),
        "tikhonov": tikhonov_fits,
        "table": [dict(zip(["method", "noise", "sigma", "mse", "ssim"], r)) for r in rows],
        "lambda_history": report.history,
        "diagnostics": report.diagnostics,
        "runtime_s": time.perf_counter() - start,
    }
    write_json(out / "summary.json", summary)
    write_manifest(out, cfg, ["table.csv", "reconstructions.csv", "trace.csv", "summary.json"])
    return summary


# ---------------------------------------------------------------------------
# Validation suites
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "validation report",
    "type": "object",
    "required": ["passed", "seed", "suites"],
    "additionalProperties": False,
    "properties": {
        "passed": {"type": "boolean"},
        "seed": {"type": "integer"},
        "inject_fault": {"type": ["string", "null"]},
        "suites": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "measured", "tolerance", "instances"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "measured": {"type": "number"},
                    "tolerance": {"type": "number"},
                    "instances": {"type": "integer", "minimum": 0},
                    "detail": {"type": "string"},
                },
            },
        },
    },
}


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Test hook: temporarily corrupt a closed-form gradient."""
    if name is None:
        yield
        return
    if name != "entropy_gradient_sign":
        raise ConfigError(f"unknown fault {name!r}")
    original = PerturbationFamily.expected_log_ratio_grad

    def flipped(self, reference=None):
        return -original(self, reference)

    PerturbationFamily.expected_log_ratio_grad = flipped
    try:
        yield
    finally:
        PerturbationFamily.expected_log_ratio_grad = original


def run_validate(cfg) -> dict:
    from . import validation

    out = _prepare_out(cfg)
    seed = cfg["seed"]
    results = []
    with inject_fault(cfg.get("inject_fault")):
        for name in cfg["suites"]:
            count = cfg["instances"].get(name, 1)
            results.append(validation.SUITES[name](RngStream(seed).child(hash_name(name)), count))
    report = {
        "passed": all(r["passed"] for r in results),
        "seed": seed,
        "inject_fault": cfg.get("inject_fault"),
        "suites": results,
    }
    report = _jsonable(report)
    jsonschema.validate(report, REPORT_SCHEMA)
    write_json(out / "report.json", report)
    write_manifest(out, cfg, ["report.json"])
    if not report["passed"]:
        failed = ", ".join(r["name"] for r in results if not r["passed"])
        raise ValidationFailure(f"suites failed: {failed}")
    return report


def hash_name(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")


RUNNERS = {
    "invert-iso": run_invert_iso,
    "invert-aniso": run_invert_aniso,
    "deconv": run_deconv,
    "validate": run_validate,
}

__all__ = ["ConfigError", "SolverDivergence", "ValidationFailure", "build_config",
           "load_config_file", "run_invert_iso", "run_invert_aniso", "run_deconv",
           "run_validate", "RUNNERS", "CONFIG_SCHEMA", "REPORT_SCHEMA"]
