import csv
import hashlib
import json

import jsonschema
import numpy as np
import pytest

from padro.cli import main
from padro.data import write_idx
from padro.experiments import (CONFIG_SCHEMA, REPORT_SCHEMA, ConfigError, anisotropy_summary,
                               build_config)

TINY_SOLVER = {
    "n_samples": 40,
    "final_samples": 16,
    "bsmd": {"iters": 30, "batch": 8, "polish_iters": 5},
    "mlmc": {"max_level": 2, "base_samples": 4},
    "bisection": {"lambda_lo": 0.3, "lambda_hi": 0.5, "max_iters": 0},
}


def _config(tmp_path, extra=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps({**TINY_SOLVER, **(extra or {})}))
    return str(path)


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg = build_config("invert-iso", {"epsilon": 0.5, "delta": 0.3}, {"epsilon": 0.2})
        assert cfg["epsilon"] == 0.2 and cfg["delta"] == 0.3 and cfg["n_samples"] == 400

    def test_nested_merge_keeps_defaults(self):
        cfg = build_config("invert-iso", {"bsmd": {"iters": 5}})
        assert cfg["bsmd"]["iters"] == 5 and cfg["bsmd"]["lr_g"] == 0.05

    @pytest.mark.parametrize("bad", [{"delta": 0.0}, {"epsilon": -1.0}, {"unknown": 1},
                                     {"bisection": {"lambda_lo": 0.5, "lambda_hi": 0.1}}])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            build_config("invert-iso", bad)

    def test_missing_paths(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            build_config("deconv", {}, {"mnist": str(tmp_path / "nope")})

    def test_defaults_satisfy_schema(self):
        for name in ("invert-iso", "invert-aniso", "deconv", "validate"):
            jsonschema.validate(build_config(name), CONFIG_SCHEMA)


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert main(["invert-iso", "--config", str(tmp_path / "missing.json")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["invert-iso", "--config", str(p)]) == 2

    def test_missing_mnist_names_files(self, tmp_path, capsys):
        assert main(["deconv", "--out", str(tmp_path)]) == 2
        assert "t10k-images-idx3-ubyte" in capsys.readouterr().err

    def test_solver_divergence(self, tmp_path, capsys):
        cfg = _config(tmp_path, {"bsmd": {"iters": 3, "batch": 8, "divergence_guard": 1e-12}})
        assert main(["invert-iso", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        report = json.loads((tmp_path / "o" / "failure.json").read_text())
        assert report["iteration"] == 1
        assert "solver failure" in capsys.readouterr().err

    def test_fetch_failure(self, tmp_path):
        assert main(["fetch-mnist", str(tmp_path / "m"),
                     "--base-url", (tmp_path / "none").as_uri() + "/"]) == 2


class TestInversionRuns:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = _config(tmp_path)
        for out in ("a", "b"):
            assert main(["invert-iso", "--config", cfg, "--seed", "4",
                         "--out", str(tmp_path / out)]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
        with open(a / "trace.csv", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "g_00", "g_01", "g_10", "g_11", "sigma_variance",
                           "sigma_std", "objective"]
        assert len(rows) - 1 <= 2 * 30
        summary = json.loads((a / "summary.json").read_text())
        assert {"g_opt", "sigma_opt", "lambda_opt", "dual_value"} <= set(summary)
        assert summary["sigma_opt"] == pytest.approx(np.sqrt(summary["sigma_variance"]))
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seeds"] == [4] and manifest["config"]["seed"] == 4
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((a / name).read_bytes()).hexdigest() == digest

    def test_anisotropic_outputs(self, tmp_path):
        cfg = _config(tmp_path, {"n_samples": 30})
        assert main(["invert-aniso", "--config", cfg, "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert 0 <= summary["anisotropy"]["axis_angle_deg"] <= 90
        assert (tmp_path / "samples.csv").exists()

    def test_axis_angle(self):
        H = np.array([[5.0, 1.0], [1.0, 2.0]])
        w, V = np.linalg.eigh(H)
        info = anisotropy_summary(np.outer(V[:, 1], V[:, 1]) + 0.1 * np.eye(2), H)
        assert info["axis_angle_deg"] == pytest.approx(0.0, abs=1e-6)
        info = anisotropy_summary(np.outer(V[:, 0], V[:, 0]) + 0.1 * np.eye(2), H)
        assert info["axis_angle_deg"] == pytest.approx(90.0, abs=1e-6)


@pytest.fixture
def mnist_dir(tmp_path):
    gen = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for split, n in (("train", 12), ("t10k", 10)):
        imgs = np.zeros((n, 28, 28), np.uint8)
        imgs[:, 6:22, 10:18] = gen.integers(100, 256, size=(n, 16, 8))
        write_idx(d / f"{split}-images-idx3-ubyte.gz", imgs)
        write_idx(d / f"{split}-labels-idx1-ubyte.gz", (np.arange(n) % 10).astype(np.uint8))
    return d


def test_deconv_small(tmp_path, mnist_dir):
    cfg = tmp_path / "d.json"
    cfg.write_text(json.dumps({"train_images": 6, "test_images": 10, "final_samples": 2,
                               "bsmd": {"iters": 10, "batch": 4, "polish_iters": 2},
                               "mlmc": {"max_level": 1, "base_samples": 2}}))
    out = tmp_path / "out"
    assert main(["deconv", "--config", str(cfg), "--mnist", str(mnist_dir),
                 "--out", str(out)]) == 0
    with open(out / "table.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 14
    # ten solver steps leave the robust operator near its tiny starting point, where noise
    # barely moves the error, so the noise-free sanity check uses the baseline rows
    mses = {r["noise"] + r["sigma"]: float(r["mse"]) for r in rows if r["method"] == "tikhonov"}
    clean = mses.pop("none")
    assert all(clean < v for v in mses.values())
    with open(out / "reconstructions.csv", encoding="utf-8") as fh:
        recon = list(csv.reader(fh))
    assert len(recon[0]) == 3 + 784 and len(recon) == 1 + 1 + 14


class TestValidate:
    def test_fault_injection_fails_gradient_suite(self, tmp_path):
        out = tmp_path / "v"
        code = main(["validate", "--suites", "gradient", "--inject-fault",
                     "entropy_gradient_sign", "--out", str(out)])
        assert code == 1
        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["suites"][0]["name"] == "gradient" and not report["suites"][0]["passed"]

    def test_fast_suites_pass(self, tmp_path):
        out = tmp_path / "v"
        assert main(["validate", "--suites", "gradient", "sinkhorn", "mlmc",
                     "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["passed"]
