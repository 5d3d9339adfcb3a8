import json
import os

import numpy as np
import pytest

from amlbench import bench, cli, config as cfg_mod
from amlbench.config import ConfigValidationError, RunConfig


def run(argv, tmp_path, monkeypatch, capsys=None):
    monkeypatch.setenv("AMLB_OUT", str(tmp_path))
    return cli.main(argv)


FAST = [
    "episodes=2", "train_steps=2", "warmup_steps=1", "batch=4", "batch_views=2",
    "rollouts=2", "chunk_h=3", "width=8", "blocks=1", "time_dim=4", "fusion_c=8",
    "seeds=0", "grid_kinds=action", "grid_steps=1", "grid_chunks=3",
    "gate_scenes=2", "probe_train_scenes=3", "probe_test_scenes=2",
]


@pytest.fixture
def fast_cfg(tmp_path):
    path = tmp_path / "fast.cfg"
    path.write_text("\n".join(FAST) + "\n")
    return str(path)


class TestConfigParsing:
    def test_defaults_round_trip_echo(self):
        cfg = RunConfig()
        echo = cfg_mod.config_echo(cfg)
        assert "head=action" in echo and "denoise_steps=4" in echo
        again = cfg_mod.parse_config_text(echo)
        assert again == cfg

    def test_sections_are_namespacing_only(self):
        cfg = cfg_mod.parse_config_text("[train]\nlr=0.01\n[world]\nepisodes=7\n")
        assert cfg.lr == 0.01 and cfg.episodes == 7

    def test_comments_and_blank_lines_ignored(self):
        cfg = cfg_mod.parse_config_text("# top\n\nchunk_h=12  # trailing\n")
        assert cfg.chunk_h == 12

    def test_tuple_values(self):
        cfg = cfg_mod.parse_config_text("seeds=3,4\ngrid_steps=1,2,5\n")
        assert cfg.seeds == (3, 4) and cfg.grid_steps == (1, 2, 5)

    def test_all_errors_collected(self):
        with pytest.raises(ConfigValidationError) as err:
            cfg_mod.parse_config_text("bogus_key=1\nlr=apple\njust a line\n")
        msg = str(err.value)
        assert "bogus_key" in msg and "lr" in msg and "line 3" in msg

    def test_enum_and_range_validation(self):
        with pytest.raises(ConfigValidationError):
            cfg_mod.parse_config_text("head=diffusion\n")
        with pytest.raises(ConfigValidationError):
            cfg_mod.parse_config_text("denoise_steps=0\n")
        with pytest.raises(ConfigValidationError):
            cfg_mod.parse_config_text("perturb_magnitude=-1\n")

    def test_hash_tracks_content(self):
        a = cfg_mod.config_hash(RunConfig())
        b = cfg_mod.config_hash(RunConfig(lr=1e-4))
        assert a != b and a == cfg_mod.config_hash(RunConfig())


class TestExitCodes:
    def test_selftest_exits_zero(self, tmp_path, monkeypatch, capsys):
        assert run(["--quiet", "selftest"], tmp_path, monkeypatch) == 0

    def test_unknown_flag_exits_one(self, tmp_path, monkeypatch, capsys):
        assert run(["--bogus", "selftest"], tmp_path, monkeypatch) == 1

    def test_missing_subcommand_exits_one(self, tmp_path, monkeypatch, capsys):
        assert run([], tmp_path, monkeypatch) == 1

    def test_help_exits_zero(self, tmp_path, monkeypatch, capsys):
        assert run(["--help"], tmp_path, monkeypatch) == 0

    def test_bad_config_value_exits_one(self, tmp_path, monkeypatch, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("head=nonsense\n")
        assert run(["--config", str(bad), "selftest"], tmp_path, monkeypatch) == 1
        assert "head" in capsys.readouterr().err

    def test_missing_config_file_exits_one(self, tmp_path, monkeypatch, capsys):
        assert run(["--config", str(tmp_path / "nope.cfg"), "selftest"], tmp_path, monkeypatch) == 1

    def test_runtime_failure_exits_two(self, tmp_path, monkeypatch, capsys):
        missing = str(tmp_path / "missing.amlb")
        assert run(["--quiet", "eval", "--ckpt", missing], tmp_path, monkeypatch) == 2


class TestRunDirectories:
    def test_gen_data_writes_dataset_and_manifest(self, tmp_path, monkeypatch, fast_cfg, capsys):
        assert run(["--quiet", "--config", fast_cfg, "gen-data"], tmp_path, monkeypatch) == 0
        d = tmp_path / "dataset"
        assert (d / "dataset.toyw").exists()
        assert "chunk_h=3" in (d / "config.resolved").read_text()
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["artifact_version"] == cli.ARTIFACT_VERSION
        assert manifest["config_hash"] == cfg_mod.config_hash(
            cfg_mod.load_config(fast_cfg, RunConfig(out=str(tmp_path), quiet=True)))

    def test_seed_flag_overrides_config(self, tmp_path, monkeypatch, fast_cfg, capsys):
        assert run(["--quiet", "--config", fast_cfg, "--seed", "5", "gen-data"],
                   tmp_path, monkeypatch) == 0
        manifest = json.loads((tmp_path / "dataset" / "manifest.json").read_text())
        assert manifest["seed"] == 5 and manifest["seeds"] == [5]

    def test_out_flag_beats_env(self, tmp_path, monkeypatch, fast_cfg, capsys):
        other = tmp_path / "elsewhere"
        monkeypatch.setenv("AMLB_OUT", str(tmp_path / "ignored"))
        assert cli.main(["--quiet", "--config", fast_cfg, "--out", str(other), "gen-data"]) == 0
        assert (other / "dataset" / "dataset.toyw").exists()


class TestPipelines:
    def test_train_then_eval(self, tmp_path, monkeypatch, fast_cfg, capsys):
        assert run(["--quiet", "--config", fast_cfg, "train"], tmp_path, monkeypatch) == 0
        ckpt = tmp_path / "train-action-h3-s0" / "checkpoint.amlb"
        assert ckpt.exists()
        loss_lines = (tmp_path / "train-action-h3-s0" / "loss_curve.csv").read_text().splitlines()
        assert loss_lines[0] == "step,loss" and len(loss_lines) == 3
        assert run(["--quiet", "--config", fast_cfg, "eval", "--ckpt", str(ckpt)],
                   tmp_path, monkeypatch) == 0
        rows = bench.read_metrics(tmp_path / "eval-s0" / "eval_metrics.csv")
        assert len(rows) == 1 and rows[0]["experiment"] == "eval"
        assert 0.0 <= float(rows[0]["success_rate"]) <= 1.0

    def test_ablate_output_is_deterministic(self, tmp_path, monkeypatch, fast_cfg, capsys):
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert cli.main(["--quiet", "--config", fast_cfg, "--out", str(out), "ablate"]) == 0
        f = "ablate/ablation_grid_metrics.csv"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_ablate_then_report(self, tmp_path, monkeypatch, fast_cfg, capsys):
        cfg2 = tmp_path / "grid.cfg"
        cfg2.write_text("\n".join(FAST).replace("grid_steps=1", "grid_steps=1,2")
                        .replace("grid_chunks=3", "grid_chunks=3,4") + "\n")
        assert run(["--quiet", "--config", str(cfg2), "ablate"], tmp_path, monkeypatch) == 0
        mdir = str(tmp_path / "ablate")
        assert run(["--quiet", "report", "--metrics-dir", mdir], tmp_path, monkeypatch) == 0
        assert os.path.exists(os.path.join(mdir, "ablation_grid_summary.csv"))
        assert os.path.exists(os.path.join(mdir, "success_vs_chunk.svg"))

    def test_report_without_metrics_exits_two(self, tmp_path, monkeypatch, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run(["--quiet", "report", "--metrics-dir", str(empty)], tmp_path, monkeypatch) == 2

    def test_export_gates(self, tmp_path, monkeypatch, capsys):
        lines = FAST + ["observe=views", "occlude_side=left"]
        cfgp = tmp_path / "views.cfg"
        cfgp.write_text("\n".join(lines) + "\n")
        assert run(["--quiet", "--config", str(cfgp), "train"], tmp_path, monkeypatch) == 0
        ckpt = tmp_path / "train-action-h3-s0" / "checkpoint.amlb"
        assert run(["--quiet", "--config", str(cfgp), "export-gates", "--ckpt", str(ckpt),
                    "--scenes", "2"], tmp_path, monkeypatch) == 0
        gates = (tmp_path / "gates" / "gate_maps.csv").read_text().splitlines()
        assert gates[0].startswith("token_index,") and len(gates) == 1 + 2 * 64
