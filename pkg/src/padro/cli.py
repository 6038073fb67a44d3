"""Command-line entry point: ``padro {invert-iso,invert-aniso,deconv,validate,fetch-mnist}``.

Configuration precedence is flags > ``--config`` file > built-in defaults.
Exit codes: 0 success, 1 solver or validation failure, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import (RUNNERS, ConfigError, ValidationFailure, build_config,
                          load_config_file, write_json)
from .optimizer import SolverDivergence

log = logging.getLogger("padro")


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padro", description="Perturbation-aware robust reconstruction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="JSON configuration file")
    shared.add_argument("--seed", type=_u64, help="root seed (unsigned 64-bit)")
    shared.add_argument("--epsilon", type=float, help="transport budget radius")
    shared.add_argument("--delta", type=float, help="entropic weight")
    shared.add_argument("--out", metavar="DIR", help="output directory")
    shared.add_argument("--mnist", metavar="DIR", help="directory with MNIST IDX files")
    shared.add_argument("--full", action="store_const", const=True,
                        help="deconv: evaluate on all 10,000 test images")

    helps = {
        "invert-iso": "2x2 inversion with isotropic Gaussian perturbations",
        "invert-aniso": "2x2 inversion with anisotropic Gaussian perturbations",
        "deconv": "MNIST deconvolution against a Laplacian-Tikhonov baseline",
        "validate": "gradient, entropy, weak-duality, Sinkhorn and MLMC self-checks",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[shared], help=text, description=text)
        if name == "validate":
            p.add_argument("--inject-fault", choices=["entropy_gradient_sign"],
                           help="corrupt a gradient on purpose (checks the checks)")
            p.add_argument("--suites", nargs="+",
                           choices=["gradient", "entropy", "weak_duality", "sinkhorn", "mlmc"])

    fetch = sub.add_parser("fetch-mnist", help="download MNIST and verify published sizes")
    fetch.add_argument("directory")
    fetch.add_argument("--base-url", default=None)
    return parser


def _flags(args) -> dict:
    out = {k: getattr(args, k, None) for k in ("seed", "epsilon", "delta", "out", "mnist", "full")}
    if getattr(args, "inject_fault", None):
        out["inject_fault"] = args.inject_fault
    if getattr(args, "suites", None):
        out["suites"] = args.suites
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.command == "fetch-mnist":
        from .data import MNIST_MIRROR, fetch_mnist
        try:
            got = fetch_mnist(args.directory, args.base_url or MNIST_MIRROR)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"fetched {len(got)} file(s) into {args.directory}")
        return 0

    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_config(args.command, file_values, _flags(args))
        log.info("running %s with seed %s", args.command, cfg["seed"])
        result = RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverDivergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        try:
            write_json(f"{cfg['out']}/failure.json",
                       {"error": str(exc), "lambda": exc.lam, "iteration": exc.iteration})
        except OSError:
            pass
        return 1
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_brief(args.command, result), indent=2))
    return 0


def _brief(command, result):
    if command == "validate":
        return {s["name"]: s["passed"] for s in result["suites"]}
    keys = ("g_opt", "sigma_opt", "covariance_opt", "lambda_opt", "dual_value", "table")
    from .experiments import _jsonable
    return _jsonable({k: result[k] for k in keys if k in result})


if __name__ == "__main__":
    sys.exit(main())
