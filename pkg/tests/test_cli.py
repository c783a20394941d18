# tests/test_cli.py
import json
from unittest.mock import patch

import pytest
import yaml

from signforge.cli import DEFAULT_OUT, build_parser, main

TINY_YAML = {
    "seed": 5,
    "detector": {
        "grid_size": 2, "boxes_per_cell": 1, "input_size": 16, "anchors": [[1.0, 1.0]], "channels": [2, 2, 2],
    },
    "training": {"n_scenes": 40, "holdout_scenes": 40, "epochs": 1, "batch_size": 20},
    "sweep": {"n_frames": 2},
    "canonical_size": 8,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY_YAML))
    return path


class TestParser:
    def test_defaults(self):
        args = build_parser().parse_args(["gen-data"])
        assert (args.config, args.seed, args.out, args.detector) == (None, None, DEFAULT_OUT, "a")

    def test_unknown_command_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["deploy"])
        assert excinfo.value.code == 2
        assert "invalid choice" in capsys.readouterr().err


class TestMain:
    def test_gen_data_writes_manifest(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 5
        assert manifest["artifacts"] == ["dataset.npz", "scene_000.ppm"]

    def test_seed_flag_overrides_config(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["render", "--config", str(config_file), "--seed", "11", "--out", str(out)]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 11

    def test_train_prints_summary(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", str(config_file), "--out", str(out)])
        capsys.readouterr()
        assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
        assert "held-out target detection rate" in capsys.readouterr().out

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"tau": 2.0}')
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "out")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("signforge: error: /attack/tau")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["gen-data", "--config", str(tmp_path / "absent.yaml")]) == 2
        assert "cannot read config file" in capsys.readouterr().err

    def test_missing_input_exit_code(self, config_file, tmp_path, capsys):
        assert main(["eval", "--config", str(config_file), "--out", str(tmp_path / "out")]) == 2
        assert "run `signforge train --detector a` first" in capsys.readouterr().err

    def test_unwritable_output_is_runtime_error(self, config_file, tmp_path, capsys):
        blocker = tmp_path / "taken"
        blocker.write_text("")
        assert main(["gen-data", "--config", str(config_file), "--out", str(blocker)]) == 1
        assert "signforge: error:" in capsys.readouterr().err

    def test_bad_log_level(self, config_file, tmp_path, capsys):
        with patch.dict("os.environ", {"SIGNFORGE_LOG_LEVEL": "chatty"}):
            assert main(["gen-data", "--config", str(config_file), "--out", str(tmp_path)]) == 2
        assert "SIGNFORGE_LOG_LEVEL" in capsys.readouterr().err

    def test_training_divergence_is_runtime_error(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["gen-data", "--config", str(config_file), "--out", str(out)])
        with patch("signforge.pipelines.train_toy", side_effect=RuntimeError("Training diverged at epoch 0")):
            assert main(["train", "--config", str(config_file), "--out", str(out)]) == 1
        assert "Training diverged" in capsys.readouterr().err
