import json
import subprocess
import sys

import pytest
import yaml

from specdiff.cli import COMMANDS, build_parser, main
from specdiff.config import RunConfig, apply_overrides, config_from_dict, load_config
from specdiff.errors import ConfigError

TINY = {
    "schedule": {"num_steps": 10, "beta_end": 0.1},
    "env": {"max_steps": 24},
    "data": {"episodes": 4},
    "target": {"hidden": [16, 16], "iterations": 20},
    "distill": {"hidden": [8], "iterations": 10},
    "scheduler": {"iterations": 1, "episodes_per_iter": 2},
    "eval": {"episodes": 2},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "c.yaml"
        path.write_text(cfg.dump())
        assert load_config(path) == cfg
        assert load_config(path).hash() == cfg.hash()

    def test_hash_ignores_out_and_workers(self):
        a = RunConfig()
        assert apply_overrides(a, {"out": "/x", "workers": 3}).hash() == a.hash()
        assert apply_overrides(a, {"spec.draft_horizon": 3}).hash() != a.hash()

    def test_all_problems_reported(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"spec": {"draft_horizon": -1, "accept_threshold": 2.0, "bogus": 1},
                              "schedule": {"num_steps": "ten"}, "nonsense": {}})
        text = "\n".join(exc.value.problems)
        for field in ("spec.draft_horizon", "spec.accept_threshold", "spec.bogus",
                      "schedule.num_steps", "nonsense"):
            assert field in text

    def test_warm_start_checked(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"scheduler": {"warm_start": {"sigma_scale": 10.0, "k_mid": 3, "foo": 1}}})
        text = "\n".join(exc.value.problems)
        assert "sigma_scale" in text and "k_mid" in text and "foo" in text
        with pytest.raises(ConfigError):
            config_from_dict({"scheduler": {"warm_start": [1, 2]}})
        assert config_from_dict({"scheduler": {"warm_start": {}}}).scheduler.warm_start == {}

    def test_overrides_skip_none(self):
        cfg = apply_overrides(RunConfig(), {"spec.draft_horizon": None, "seed": 4})
        assert cfg.seed == 4 and cfg.spec.draft_horizon == RunConfig().spec.draft_horizon

    def test_bad_yaml(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("spec: [1, 2")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.yaml")


class TestCli:
    @pytest.mark.parametrize("command", list(COMMANDS))
    def test_help_lists_flags(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[command]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text

    def test_precedence(self, tiny_cfg, monkeypatch, capsys):
        monkeypatch.setenv("SPECDIFF_WORKERS", "3")
        monkeypatch.setenv("SPECDIFF_OUT", "/from/env")
        assert main(["config", "--config", str(tiny_cfg), "--out", "/from/flag", "--k", "2"]) == 0
        cfg = yaml.safe_load(capsys.readouterr().out)
        assert cfg["out"] == "/from/flag"
        assert cfg["workers"] == 3
        assert cfg["spec"]["draft_horizon"] == 2
        assert cfg["schedule"]["num_steps"] == 10

    def test_config_error_exit(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"spec": {"draft_horizon": -3}, "eval": {"episodes": 0}}))
        assert main(["config", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "spec.draft_horizon" in err and "eval.episodes" in err

    def test_bad_env_workers(self, monkeypatch):
        monkeypatch.setenv("SPECDIFF_WORKERS", "many")
        assert main(["config"]) == 2

    def test_missing_dependency_exit(self, tmp_path, capsys):
        assert main(["eval", "--out", str(tmp_path)]) == 3
        assert "gen-data" in capsys.readouterr().err

    def test_bench_full_acceptance(self, tmp_path):
        assert main(["bench", "--k", "9", "--episodes", "50", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "bench.json").read_text())
        assert res["nfe_percent"] == 22.25
        assert res["mean_target_passes"] == 11

    def test_couple_test_passes(self, tmp_path, capsys):
        assert main(["couple-test", "--episodes", "20000", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.count("PASS") == 3

    def test_sample_test_exit_codes(self, tmp_path):
        args = ["sample-test", "--episodes", "20000", "--steps", "20", "--out", str(tmp_path)]
        assert main(args) == 0
        assert main(args + ["--mode", "threshold", "--bias", "1.5", "--threshold", "0.05"]) == 4

    def test_manifest_deterministic(self, tmp_path):
        for d in ("a", "b"):
            main(["bench", "--k", "3", "--episodes", "20", "--bias", "0.3", "--out", str(tmp_path / d)])
        a = (tmp_path / "a" / "bench.manifest.json").read_text()
        b = (tmp_path / "b" / "bench.manifest.json").read_text()
        # the wall-clock ratio is the only timing-dependent field
        strip = lambda s: {k: v for k, v in json.loads(s)["result"].items() if k != "wall_clock_ratio"}  # noqa: E731
        assert strip(a) == strip(b)
        assert json.loads(a)["config_hash"] == json.loads(b)["config_hash"]

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "specdiff", "config"], capture_output=True,
                             text=True, check=True).stdout
        assert "draft_horizon" in out


def test_tiny_pipeline(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    base = ["--config", str(tiny_cfg), "--out", str(out)]
    for cmd in ("gen-data", "train-target", "distill", "train-scheduler"):
        assert main([cmd, *base]) == 0, cmd
    for policy in ("baseline", "fixed", "scheduler"):
        assert main(["eval", *base, "--policy", policy, "--events"]) == 0
        summary = json.loads((out / f"eval_{policy}" / "summary.json").read_text())
        assert summary["episodes"] == 2
    assert (out / "eval_fixed" / "events.jsonl").exists()
    assert len(list((out / "eval_fixed" / "plots").glob("*.svg"))) == 3
    first = (out / "gen-data.manifest.json").read_bytes()
    assert main(["gen-data", *base]) == 0
    assert (out / "gen-data.manifest.json").read_bytes() == first
    manifest = json.loads((out / "eval-fixed.manifest.json").read_text())
    assert set(manifest["inputs"]) == {"data.bin", "target.ckpt", "drafter.ckpt"}


def test_k0_eval_matches_baseline(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    base = ["--config", str(tiny_cfg), "--out", str(out)]
    for cmd in ("gen-data", "train-target", "distill"):
        main([cmd, *base])
    main(["eval", *base, "--policy", "baseline"])
    main(["eval", *base, "--policy", "fixed", "--k", "0", "--mode", "stochastic"])
    a = json.loads((out / "eval_baseline" / "reports.json").read_text())
    b = json.loads((out / "eval_fixed" / "reports.json").read_text())
    for ra, rb in zip(a, b):
        for key in ("success", "progress", "steps", "speed_per_step", "tally"):
            assert ra[key] == rb[key]
