import json
import math

import pytest

from flowheat import cli, scenarios as sc


def test_list_scenarios(capsys):
    assert cli.main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    assert "torus-baseline" in out
    assert "sphere-shrinking" in out


def test_describe_constants_b_zero(capsys):
    code = cli.main([
        "describe-constants",
        "--inputs",
        "n=3,cs=0.4,safety=1.5,horizon=0.2,volume=19.74,min_trace=6,max_neg_trace=0",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "C1 = exp(A/2 + n/2)" in out  # the B = 0 reduction is printed
    assert "safety=1.5" in out


def test_config_schema_prints(capsys):
    assert cli.main(["config-schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "bounds" in schema and "flow" in schema


class TestValidation:
    def test_missing_horizon_named(self):
        cfg = sc.load_bundled("torus-baseline")
        del cfg["flow"]["horizon"]
        with pytest.raises(sc.ConfigError, match="flow.horizon"):
            sc.validate_config(cfg)

    def test_missing_periods_named(self):
        cfg = sc.load_bundled("torus-baseline")
        del cfg["geometry"]["periods"]
        with pytest.raises(sc.ConfigError, match="geometry.periods"):
            sc.validate_config(cfg)

    def test_bad_formats(self):
        cfg = sc.load_bundled("torus-baseline")
        cfg["output"]["formats"] = ["parquet"]
        with pytest.raises(sc.ConfigError, match="formats"):
            sc.validate_config(cfg)

    def test_cli_exit_code_on_invalid(self, tmp_path, capsys):
        cfg = sc.load_bundled("torus-baseline")
        del cfg["flow"]["horizon"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["run", str(path)]) == 2
        assert "flow.horizon" in capsys.readouterr().err


@pytest.fixture(scope="module")
def quick_cfg():
    # compact warped scenario exercising the full artifact set
    cfg = sc.load_bundled("warped-perturbed")
    cfg["geometry"]["resolution"] = 128
    cfg["geometry"]["constants_resolution"] = 128
    cfg["flow"]["horizon"] = 0.05
    cfg["flow"]["target_rel_change"] = 4e-4
    cfg["flow"]["dt_max"] = 2e-4
    cfg["bounds"]["pairs"] = [[0.0, 0.03]]
    cfg["entropy"]["t_star"] = 0.04
    cfg["entropy"]["sigma"] = 0.04
    cfg["entropy"]["infimum_pair"] = [0.02, 0.03]
    cfg["entropy"]["budget"] = 150
    return cfg


class TestRun:
    def test_run_produces_artifacts(self, quick_cfg, tmp_path):
        out = tmp_path / "out"
        assert cli.run_scenario(quick_cfg, str(out), strict=True) == 0
        expected = [
            "trajectory.json", "constants.json", "reports.json", "summary.csv",
            "min_trace.csv", "w_trace.csv", "mu_star.json", "run_summary.json",
            "run_meta.json", "config_schema.json", "config_used.json",
        ]
        for name in expected:
            assert (out / name).exists(), name
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["bounds"]["failed"] == 0
        assert summary["trajectory"]["min_trace_violations"] == 0

    def test_reports_embed_config_hash(self, quick_cfg, tmp_path):
        out = tmp_path / "out"
        cli.run_scenario(quick_cfg, str(out))
        reports = json.loads((out / "reports.json").read_text())
        chash = cli.config_hash(quick_cfg)
        assert all(r["constants"]["config_hash"] == chash for r in reports)

    def test_rerun_is_byte_identical(self, quick_cfg, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        cli.run_scenario(quick_cfg, str(out1))
        cli.run_scenario(quick_cfg, str(out2))
        for name in ("reports.json", "constants.json", "run_summary.json",
                     "summary.csv", "w_trace.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_strict_flag_fails_on_corrupted_constant(self, quick_cfg, tmp_path):
        # negative control: shrinking the assembled constant must flip the
        # suite to failing and surface through the strict exit code
        cfg = json.loads(json.dumps(quick_cfg))
        cfg.setdefault("constants", {})["overrides"] = {"constant_scale": 1e-6}
        out = tmp_path / "neg"
        code = cli.run_scenario(cfg, str(out), strict=True)
        assert code == 4
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["bounds"]["failed"] > 0
