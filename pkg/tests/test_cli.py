import json
import subprocess
import sys

import numpy as np
import pytest

from plantreg import cli, store

SMALL_SYNTH = ["--plants", "2", "--days", "2", "--crops", "mustard", "--seed", "3"]


def run(args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def small_cache(tmp_path):
    base = tmp_path / "cache"
    assert run(["synth", "--out", base, *SMALL_SYNTH, "--quiet"]) == 0
    return base


class TestBasics:
    def test_unknown_subcommand_exits_1(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_exits_1(self):
        assert run([]) == 1

    def test_missing_required_flag_exits_1(self):
        assert run(["synth"]) == 1

    def test_missing_input_file_exits_2(self, tmp_path):
        assert run(["validate-cache", tmp_path / "nope", "--quiet"]) == 2

    def test_console_entry_point(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "plantreg.cli", "synth", "--out",
             str(tmp_path / "c"), *SMALL_SYNTH],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr


class TestSynthAndValidate:
    def test_synth_then_validate(self, small_cache, capsys):
        assert run(["validate-cache", small_cache, "--quiet"]) == 0
        assert "cache OK" in capsys.readouterr().out

    def test_synth_writes_truth_and_priors(self, small_cache):
        assert small_cache.with_name("cache.truth.csv").exists()
        assert small_cache.with_name("cache.priors.manifest.json").exists()
        rows = store.read_metadata_csv(str(small_cache) + ".truth.csv")
        assert len(rows) == 2 * 2 * 5 * 24

    def test_validate_reports_findings_with_exit_1(self, tmp_path, capsys):
        cache = store.EmbeddingCache(
            records=[store.ViewRecord("mustard", 1, 1, 1, 0, 0, 0)],
            matrix=np.full((1, 512), np.nan, np.float32),
        )
        base = tmp_path / "bad"
        store.write_cache(cache.records, cache.matrix, base)
        assert run(["validate-cache", base, "--quiet"]) == 1
        assert "non_finite" in capsys.readouterr().out

    def test_synth_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["synth", "--out", a, *SMALL_SYNTH, "--quiet"])
        run(["synth", "--out", b, *SMALL_SYNTH, "--quiet"])
        assert (tmp_path / "a.f32bin").read_bytes() == (tmp_path / "b.f32bin").read_bytes()
        assert (tmp_path / "a.manifest.json").read_text() == (
            tmp_path / "b.manifest.json"
        ).read_text()


class TestTrainEval:
    def test_unimodal_flow(self, small_cache, tmp_path):
        model = tmp_path / "uni"
        report = tmp_path / "report.json"
        assert run(
            ["train", "--mode", "unimodal", "--cache", small_cache, "--out", model,
             "--hold-out", "mustard:2", "--epochs", "2", "--quiet"]
        ) == 0
        assert run(
            ["eval", "--model", model, "--cache", small_cache,
             "--hold-out", "mustard:2", "--out", report, "--quiet"]
        ) == 0
        data = json.loads(report.read_text())
        assert data["kind"] == "eval_report"
        assert data["unit"] == "image"
        assert "mustard" in data["results"]["per_crop"]

    def test_multimodal_flow_with_level_regressor(self, small_cache, tmp_path):
        model = tmp_path / "multi"
        level = tmp_path / "level"
        assert run(
            ["train-level", "--cache", small_cache, "--out", level,
             "--epochs", "2", "--quiet"]
        ) == 0
        assert run(
            ["train", "--mode", "multimodal", "--cache", small_cache,
             "--priors", small_cache, "--out", model,
             "--hold-out", "mustard:2", "--epochs", "2", "--quiet"]
        ) == 0
        report_meta = tmp_path / "meta.json"
        report_reg = tmp_path / "reg.json"
        assert run(
            ["eval", "--model", model, "--cache", small_cache, "--priors", small_cache,
             "--hold-out", "mustard:2", "--out", report_meta, "--quiet"]
        ) == 0
        assert run(
            ["eval", "--model", model, "--cache", small_cache, "--priors", small_cache,
             "--hold-out", "mustard:2", "--level-source", "regressor",
             "--level-model", level, "--out", report_reg, "--quiet"]
        ) == 0
        assert json.loads(report_meta.read_text())["unit"] == "group"

    def test_multimodal_requires_priors(self, small_cache, tmp_path):
        code = run(
            ["train", "--mode", "multimodal", "--cache", small_cache,
             "--out", tmp_path / "m", "--epochs", "1", "--quiet"]
        )
        assert code == 1

    def test_train_determinism(self, small_cache, tmp_path):
        for name in ("a", "b"):
            assert run(
                ["train", "--mode", "unimodal", "--cache", small_cache,
                 "--out", tmp_path / name, "--epochs", "2", "--seed", "11", "--quiet"]
            ) == 0
        assert (tmp_path / "a.f32bin").read_bytes() == (tmp_path / "b.f32bin").read_bytes()

    def test_eval_determinism(self, small_cache, tmp_path):
        model = tmp_path / "m"
        run(["train", "--mode", "unimodal", "--cache", small_cache, "--out", model,
             "--epochs", "1", "--quiet"])
        for name in ("r1.json", "r2.json"):
            assert run(
                ["eval", "--model", model, "--cache", small_cache,
                 "--hold-out", "mustard:2", "--out", tmp_path / name, "--quiet"]
            ) == 0
        assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()

    def test_bad_hold_out_spec(self, small_cache, tmp_path):
        assert run(
            ["eval", "--model", tmp_path / "missing", "--cache", small_cache,
             "--hold-out", "mustard", "--out", tmp_path / "r.json", "--quiet"]
        ) == 1


class TestSensitivityAndReport:
    @pytest.fixture
    def trained(self, small_cache, tmp_path):
        model = tmp_path / "m"
        run(["train", "--mode", "multimodal", "--cache", small_cache,
             "--priors", small_cache, "--out", model, "--hold-out", "mustard:2",
             "--epochs", "2", "--quiet"])
        return model

    def test_sensitivity_outputs(self, small_cache, trained, tmp_path):
        out = tmp_path / "curve"
        assert run(
            ["sensitivity", "--model", trained, "--cache", small_cache,
             "--priors", small_cache, "--hold-out", "mustard:2", "--out", out,
             "--percentages", "0,50,95.8", "--trials", "2", "--seed", "4", "--quiet"]
        ) == 0
        data = json.loads((tmp_path / "curve.json").read_text())
        assert data["kind"] == "sensitivity_curve"
        assert [p["removal_percent"] for p in data["points"]] == [0.0, 50.0, 95.8]
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "removal_percent,mae_age,mae_leaf,trials,seed"

    def test_sensitivity_determinism(self, small_cache, trained, tmp_path):
        for name in ("c1", "c2"):
            assert run(
                ["sensitivity", "--model", trained, "--cache", small_cache,
                 "--priors", small_cache, "--hold-out", "mustard:2",
                 "--out", tmp_path / name, "--percentages", "0,50",
                 "--trials", "2", "--seed", "4", "--quiet"]
            ) == 0
        assert (tmp_path / "c1.json").read_bytes() == (tmp_path / "c2.json").read_bytes()
        assert (tmp_path / "c1.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()

    def test_report_conversion(self, small_cache, trained, tmp_path):
        report = tmp_path / "r.json"
        run(["eval", "--model", trained, "--cache", small_cache, "--priors", small_cache,
             "--hold-out", "mustard:2", "--out", report, "--quiet"])
        md = tmp_path / "r.md"
        csv_path = tmp_path / "r.csv"
        assert run(["report", "--input", report, "--format", "markdown", "--out", md, "--quiet"]) == 0
        assert run(["report", "--input", report, "--format", "csv", "--out", csv_path, "--quiet"]) == 0
        assert "Mean" in md.read_text()
        assert csv_path.read_text().startswith("crop,task,")


class TestConfigPrecedence:
    def test_full_train_run_from_config_file(self, small_cache, tmp_path):
        config = tmp_path / "train.json"
        config.write_text(
            json.dumps(
                {
                    "mode": "multimodal",
                    "cache": str(small_cache),
                    "priors": str(small_cache),
                    "out": str(tmp_path / "from_config"),
                    "hold_out": "mustard:2",
                    "epochs": 1,
                    "seed": 3,
                }
            )
        )
        assert run(["train", "--config", config, "--quiet"]) == 0
        manifest = json.loads((tmp_path / "from_config.manifest.json").read_text())
        assert manifest["mode"] == "multimodal"
        assert manifest["seed"] == 3

    def test_missing_required_value_reported(self, tmp_path):
        config = tmp_path / "partial.json"
        config.write_text(json.dumps({"mode": "unimodal"}))
        assert run(["train", "--config", config, "--quiet"]) == 1

    def test_config_file_then_flag_override(self, small_cache, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"epochs": 1, "seed": 11}))
        # run A: config file only; run B: same values via flags
        run(["train", "--mode", "unimodal", "--cache", small_cache,
             "--out", tmp_path / "a", "--config", config, "--quiet"])
        run(["train", "--mode", "unimodal", "--cache", small_cache,
             "--out", tmp_path / "b", "--epochs", "1", "--seed", "11", "--quiet"])
        assert (tmp_path / "a.f32bin").read_bytes() == (tmp_path / "b.f32bin").read_bytes()
        # run C: flag overrides the config file's epochs
        run(["train", "--mode", "unimodal", "--cache", small_cache,
             "--out", tmp_path / "c", "--config", config, "--epochs", "2", "--quiet"])
        assert (tmp_path / "a.f32bin").read_bytes() != (tmp_path / "c.f32bin").read_bytes()
        manifest = json.loads((tmp_path / "c.manifest.json").read_text())
        assert manifest["seed"] == 11  # config seed still applies
