"""End-to-end CLI tests: subcommands, exit codes, manifests, JSON schema."""

import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from tobitcheck.cli import main
from tobitcheck.data import Sample, write_csv

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "docs" / "report_schema.json"


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def null_csv(tmp_path_factory):
    rng = np.random.Generator(np.random.Philox(seed=np.random.SeedSequence([55])))
    n = 4000
    z = rng.standard_normal(n)
    v = rng.standard_normal(n)
    u = rng.standard_normal(n)
    d = 2 * z - v
    s = Sample(y=np.maximum(0.0, d + u), d=d, z=z)
    path = tmp_path_factory.mktemp("data") / "null.csv"
    write_csv(s, path)
    return path


@pytest.fixture(scope="module")
def binary_csv(tmp_path_factory):
    d = np.repeat([0.0, 1.0], 60)
    y = np.where(d == 1.0, 5.0, 3.0)
    y[:2] = 0.0
    path = tmp_path_factory.mktemp("data") / "binary.csv"
    write_csv(Sample(y=y, d=d), path)
    return path


def validate_schema(doc, kind):
    """Minimal structural validation against the shipped schema document."""
    schema = json.loads(SCHEMA_PATH.read_text())
    spec = schema["documents"][kind]
    assert doc["schema"] == spec["schema"]
    for key, typename in spec["required"].items():
        assert key in doc, f"missing {key}"
        pytype = {"number": (int, float), "string": str, "boolean": bool,
                  "object": dict, "array": list,
                  "integer": int}[typename]
        assert isinstance(doc[key], pytype), (key, typename, type(doc[key]))


class TestEstimateCommand:
    def test_classic_fit_and_report(self, runner, null_csv, tmp_path):
        out = tmp_path / "fit.json"
        res = runner.invoke(main, [
            "estimate", "--input", str(null_csv), "--model", "classic",
            "--json", str(out),
        ])
        assert res.exit_code == 0, res.output
        assert "alpha1" in res.output
        doc = json.loads(out.read_text())
        validate_schema(doc, "fit-report")
        assert abs(doc["estimates"]["alpha1"] - 1.0) < 0.1

    def test_iv_requires_z(self, runner, null_csv):
        res = runner.invoke(main, ["estimate", "--input", str(null_csv),
                                   "--model", "iv"])
        assert res.exit_code == 2

    def test_missing_input_usage_error(self, runner):
        res = runner.invoke(main, ["estimate", "--model", "classic"])
        assert res.exit_code == 2

    def test_input_validation_exit_2(self, runner, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,d\n-1,0\n")
        res = runner.invoke(main, ["estimate", "--input", str(bad)])
        assert res.exit_code == 2

    def test_iv_fit(self, runner, null_csv, tmp_path):
        out = tmp_path / "ivfit.json"
        res = runner.invoke(main, [
            "estimate", "--input", str(null_csv), "--model", "iv",
            "--z", "z", "--json", str(out),
        ])
        assert res.exit_code == 0, res.output
        doc = json.loads(out.read_text())
        assert abs(doc["structural"]["alpha1"] - 1.0) < 0.15


class TestTestCommand:
    def test_reject_flag_is_data_not_failure(self, runner, null_csv, tmp_path):
        out = tmp_path / "test.json"
        res = runner.invoke(main, [
            "test", "--input", str(null_csv), "--model", "classic",
            "--alpha", "0.10,0.05", "--reps", "400", "--grid-points", "10",
            "--seed", "3", "--json", str(out),
        ])
        assert res.exit_code == 0, res.output
        doc = json.loads(out.read_text())
        validate_schema(doc, "test-report")
        assert len(doc["results"]) == 2
        for r in doc["results"]:
            validate_schema(r, "test-result")

    def test_alpha_zero_usage_error(self, runner, null_csv):
        res = runner.invoke(main, ["test", "--input", str(null_csv),
                                   "--alpha", "0"])
        assert res.exit_code == 2

    def test_manifest_reproducibility(self, runner, null_csv, tmp_path):
        args = ["test", "--input", str(null_csv), "--model", "classic",
                "--alpha", "0.05", "--reps", "300", "--grid-points", "8",
                "--seed", "9"]
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        r1 = runner.invoke(main, args + ["--json", str(out1)])
        r2 = runner.invoke(main, args + ["--json", str(out2)])
        assert r1.exit_code == 0 and r2.exit_code == 0
        assert out1.read_bytes() == out2.read_bytes()
        man = json.loads((tmp_path / "a.json.manifest.json").read_text())
        assert man["schema"] == "tobitcheck/run-manifest/v1"
        assert man["input_sha256"]
        assert man["seed"] == 9


class TestBoundsCommand:
    def test_binary_toy_bound(self, runner, binary_csv, tmp_path):
        out = tmp_path / "bounds.json"
        res = runner.invoke(main, [
            "bounds", "--input", str(binary_csv), "--method", "discrete",
            "--boot-reps", "200", "--seed", "5", "--json", str(out),
        ])
        # the toy file is noiseless, so the bootstrap quantile degenerates
        if res.exit_code == 0:
            doc = json.loads(out.read_text())
            assert doc["lower_bound"] == pytest.approx(2.0)
        else:
            assert res.exit_code == 2
            assert "degenerate" in res.output

    def test_continuous_bound_and_seed_repeatability(self, runner, tmp_path):
        rng = np.random.default_rng(8)
        n = 1500
        d = rng.uniform(0, 2, n)
        y = 5 + d + 0.5 * rng.standard_normal(n)
        path = tmp_path / "cont.csv"
        write_csv(Sample(y=np.maximum(0.0, y), d=d), path)
        out1, out2 = tmp_path / "b1.json", tmp_path / "b2.json"
        args = ["bounds", "--input", str(path), "--method", "continuous",
                "--grid-size", "5", "--boot-reps", "200", "--seed", "21"]
        r1 = runner.invoke(main, args + ["--json", str(out1)])
        r2 = runner.invoke(main, args + ["--json", str(out2)])
        assert r1.exit_code == 0, r1.output
        d1 = json.loads(out1.read_text())
        d2 = json.loads(out2.read_text())
        validate_schema(d1, "mts-bound")
        assert d1["ci_limit"] == d2["ci_limit"]
        assert d1["ci_limit"] <= d1["lower_bound"]
        assert abs(d1["lower_bound"] - 1.0) < 0.5


class TestSimulateCommand:
    def test_smoke_config_runs(self, runner, tmp_path):
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text(
            "[smoke]\nmodel = classic\nn = 2000\nrho = 0.0\nreps = 1\n"
            "seed = 42\nr_draws = 300\ngrid_points = 8\n"
        )
        out = tmp_path / "study"
        res = runner.invoke(main, ["simulate", "--config", str(cfg),
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert (out / "study.csv").exists()
        doc = json.loads((out / "study.json").read_text())
        validate_schema(doc, "study-report")

    def test_malformed_config_names_key(self, runner, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[a]\nmodel = classic\nn = 2000\nwibble = 1\n")
        res = runner.invoke(main, ["simulate", "--config", str(cfg),
                                   "--out", str(tmp_path / "o")])
        assert res.exit_code == 2
        assert "wibble" in res.output

    def test_resume(self, runner, tmp_path):
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text(
            "[resume]\nmodel = classic\nn = 2000\nreps = 2\nseed = 43\n"
            "r_draws = 300\ngrid_points = 8\n"
        )
        out = tmp_path / "study"
        r1 = runner.invoke(main, ["simulate", "--config", str(cfg),
                                  "--out", str(out)])
        assert r1.exit_code == 0, r1.output
        r2 = runner.invoke(main, ["simulate", "--config", str(cfg),
                                  "--out", str(out), "--resume"])
        assert r2.exit_code == 0
        assert "replication" not in r2.output   # nothing re-ran
