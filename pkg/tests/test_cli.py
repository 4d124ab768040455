import json
import os
import subprocess
import sys

import pytest

from duospec.cli import main
from duospec.config import (ConfigError, load_config_file, resolve_config,
                            scene_config, train_config)

TINY_FLAGS = ["--widths", "4", "6", "8", "10", "10", "--decoder-channels", "8",
              "--embed-dim", "6", "--epochs", "2", "--batch-size", "4"]


def run_cli(args):
    return main(args)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            with open(os.path.join(dirpath, name), "rb") as f:
                out[rel] = f.read()
    return out


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    code = run_cli(["gen-data", "--out", str(out), "--seed", "7", "--count", "12"])
    assert code == 0
    return out


class TestConfigResolution:
    def test_defaults_resolve_desk_preset(self):
        cfg = resolve_config()
        assert cfg["epochs"] == 60 and cfg["count"] == 80

    def test_paper_preset(self):
        cfg = resolve_config(overrides={"preset": "paper"})
        assert cfg["epochs"] == 200 and cfg["count"] == 1600

    def test_explicit_value_beats_preset(self):
        cfg = resolve_config(overrides={"preset": "paper", "epochs": 5})
        assert cfg["epochs"] == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_config(overrides={"epocs": 10})

    def test_type_validation(self):
        with pytest.raises(ConfigError, match="integer"):
            resolve_config(overrides={"epochs": "ten"})
        with pytest.raises(ConfigError, match="boolean"):
            resolve_config(overrides={"night": 1})

    def test_file_overridden_by_flags(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 3, "epochs": 9}))
        cfg = resolve_config(load_config_file(str(path)), {"epochs": 4})
        assert cfg["seed"] == 3 and cfg["epochs"] == 4

    def test_builders_produce_typed_configs(self):
        cfg = resolve_config()
        assert scene_config(cfg).size == 32
        assert train_config(cfg).epochs == 60


class TestGenData:
    def test_deterministic_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["gen-data", "--out", str(a), "--seed", "7", "--count", "6"]) == 0
        assert run_cli(["gen-data", "--out", str(b), "--seed", "7", "--count", "6"]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_config_echoed(self, dataset_dir):
        echoed = json.loads((dataset_dir / "config.json").read_text())
        assert echoed["seed"] == 7 and echoed["count"] == 12


class TestTrainEvalCommands:
    def test_stage1_stage2_eval_chain(self, dataset_dir, tmp_path, capsys):
        run1 = tmp_path / "s1"
        args = ["train-stage1", "--data", str(dataset_dir / "manifest.tsv"),
                "--out", str(run1), "--seed", "1"] + TINY_FLAGS
        assert run_cli(args) == 0
        ckpt = run1 / "stage1_eo_final.ckpt"
        assert ckpt.exists() and (run1 / "stage1_eo_metrics.tsv").exists()
        assert (run1 / "config.json").exists()

        run2 = tmp_path / "s2"
        args = ["train-stage2", "--data", str(dataset_dir / "manifest.tsv"),
                "--out", str(run2), "--pretrained", str(ckpt), "--seed", "1"] + TINY_FLAGS
        assert run_cli(args) == 0
        ckpt2 = run2 / "stage2_final.ckpt"
        assert ckpt2.exists()

        capsys.readouterr()
        assert run_cli(["eval", "--checkpoint", str(ckpt2),
                        "--data", str(dataset_dir / "manifest.tsv"),
                        "--mode", "ir-only"]) == 0
        out = capsys.readouterr().out
        assert "miou" in out and "iou_class_0" in out

    def test_metrics_log_reruns_byte_identical(self, dataset_dir, tmp_path):
        logs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            args = ["train-stage1", "--data", str(dataset_dir / "manifest.tsv"),
                    "--out", str(out), "--seed", "3", "--modality", "ir"] + TINY_FLAGS
            assert run_cli(args) == 0
            logs.append((out / "stage1_ir_metrics.tsv").read_bytes())
        assert logs[0] == logs[1]


class TestAblateCommand:
    def test_ablate_writes_table(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "ablation"
        args = ["ablate", "--data", str(dataset_dir / "manifest.tsv"),
                "--out", str(out), "--seeds", "0"] + TINY_FLAGS
        assert run_cli(args) == 0
        table = (out / "ablation.tsv").read_text()
        assert table.startswith("variant\tseed\tmiou")
        for variant in ("full", "no_contrastive", "no_fusion", "no_exchange",
                        "no_contrastive_no_exchange"):
            assert f"{variant}\t0\t" in table
            assert f"{variant}\tmedian\t" in table
        assert "69.38" in table  # published reference footer
        capsys.readouterr()


class TestGradcheckCommand:
    def test_subset_passes(self, capsys):
        assert run_cli(["gradcheck", "--only", "conv2d", "softmax_channel"]) == 0
        out = capsys.readouterr().out
        assert "conv2d\t" in out and "PASS" in out

    def test_unknown_check_name(self):
        assert run_cli(["gradcheck", "--only", "warp_drive"]) == 2


class TestExitCodes:
    def test_usage_error_on_bad_mode(self):
        with pytest.raises(SystemExit) as err:
            run_cli(["eval", "--checkpoint", "x", "--data", "y", "--mode", "sideways"])
        assert err.value.code == 2

    def test_missing_manifest_is_io_error(self, tmp_path):
        args = ["train-stage1", "--data", str(tmp_path / "absent.tsv"),
                "--out", str(tmp_path / "o")]
        assert run_cli(args) == 3

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"no_such_key": 1}))
        args = ["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)]
        assert run_cli(args) == 2

    def test_not_a_checkpoint_is_io_error(self, tmp_path, dataset_dir):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_bytes(b"not a checkpoint")
        args = ["eval", "--checkpoint", str(bogus),
                "--data", str(dataset_dir / "manifest.tsv"), "--mode", "fused"]
        assert run_cli(args) == 3


class TestHelp:
    def test_help_lists_all_subcommands(self):
        result = subprocess.run([sys.executable, "-m", "duospec.cli", "--help"],
                                capture_output=True, text=True)
        assert result.returncode == 0
        for sub in ("gen-data", "train-stage1", "train-stage2", "eval",
                    "gradcheck", "ablate"):
            assert sub in result.stdout

    def test_every_subcommand_help_runs(self):
        for sub in ("gen-data", "train-stage1", "train-stage2", "eval",
                    "gradcheck", "ablate"):
            result = subprocess.run([sys.executable, "-m", "duospec.cli", sub, "--help"],
                                    capture_output=True, text=True)
            assert result.returncode == 0
            assert "--help" in result.stdout

    def test_thread_pin_env_default(self):
        code = ("import duospec.cli, os; "
                "print(os.environ['OMP_NUM_THREADS'])")
        result = subprocess.run([sys.executable, "-c", code],
                                capture_output=True, text=True,
                                env={k: v for k, v in os.environ.items()
                                     if not k.endswith("_NUM_THREADS")})
        assert result.stdout.strip() == "1"
