# tests/test_pipelines.py
import json

import numpy as np
import pytest

from signforge.attack import decode_perturbation
from signforge.config import parse_config
from signforge.evalharness import read_report
from signforge.manifest import build_manifest, get_version_info, write_manifest
from signforge.model_store import load_model
from signforge.pipelines import (
    COMMANDS,
    MissingInputError,
    load_dataset,
    run,
)
from signforge.ppm import read_ppm

TINY_RUN = {
    "seed": 5,
    "detector": {
        "grid_size": 2, "boxes_per_cell": 1, "input_size": 16, "anchors": [[1.0, 1.0]], "channels": [2, 2, 2],
    },
    "detector_b": {
        "grid_size": 2, "boxes_per_cell": 1, "input_size": 16, "anchors": [[1.0, 1.0]], "channels": [2, 3, 2],
    },
    "training": {"n_scenes": 40, "holdout_scenes": 4, "epochs": 1, "batch_size": 20},
    "scene": {"n_backgrounds": 2},
    "attack": {"epochs": 2, "batch_size": 2, "canonical_size": 8},
    "creation": {"patch_size": 4, "epochs": 2, "batch_size": 2, "eval_placements": 3},
    "sweep": {"n_frames": 3},
}


def tiny_config(**blocks):
    data = json.loads(json.dumps(TINY_RUN))
    data.update(blocks)
    return parse_config(data)


def run_chain(out_dir, *commands, config=None):
    config = config or tiny_config()
    results = {}
    for command in commands:
        detector = "b" if command == "train-b" else "a"
        results[command] = run("train" if command == "train-b" else command, config, out_dir, detector)
    return results


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    results = run_chain(out, "gen-data", "train", "train-b", "attack-disappear", "attack-create")
    return out, results


class TestGenData:
    def test_dataset_split(self, workspace):
        out, _ = workspace
        train, holdout = load_dataset(out / "dataset.npz")
        assert (len(train), len(holdout)) == (40, 4)
        assert train[0].image.shape == (16, 16, 3)

    def test_preview_written(self, workspace):
        out, results = workspace
        assert read_ppm(out / "scene_000.ppm").shape == (16, 16, 3)
        assert out / "scene_000.ppm" in results["gen-data"].artifacts


class TestTrain:
    def test_models_for_both_detectors(self, workspace):
        out, _ = workspace
        a = load_model(out / "model.mdet")
        b = load_model(out / "model_b.mdet")
        assert a.architecture == "conv-2-2-2"
        assert b.architecture == "conv-2-3-2"

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(MissingInputError, match="gen-data"):
            run("train", tiny_config(), tmp_path)


class TestAttacks:
    def test_disappearance_artifacts(self, workspace):
        out, _ = workspace
        delta = decode_perturbation((out / "perturbation.pert").read_bytes())
        assert delta.shape == (8, 8, 3)
        trace = (out / "loss_trace.csv").read_text().splitlines()
        assert trace[0] == "epoch,J_term,TV_term,NPS_term,total"
        assert len(trace) == 3
        assert read_ppm(out / "mask.ppm").shape == (8, 8, 3)

    def test_creation_artifacts(self, workspace):
        out, _ = workspace
        assert decode_perturbation((out / "patch.pert").read_bytes()).shape == (4, 4, 3)
        assert len((out / "patch_loss_trace.csv").read_text().splitlines()) == 3

    def test_attack_needs_model(self, tmp_path):
        with pytest.raises(MissingInputError, match="train --detector a"):
            run("attack-disappear", tiny_config(), tmp_path)


class TestEval:
    def test_disappearance_reports(self, workspace):
        out, _ = workspace
        result = run("eval", tiny_config(), out)
        clean = read_report(out / "eval_disappearance_clean.json")
        attacked = read_report(out / "eval_disappearance_two-bar-sticker.json")
        assert clean.total_frames == attacked.total_frames == 3
        assert (out / "eval_disappearance_clean.csv").exists()
        assert result.summary[0].startswith("clean: ")
        assert "environment" in result.summary[-1]

    def test_creation_reports(self, workspace):
        out, _ = workspace
        run("eval", tiny_config(eval={"mode": "creation", "formats": ["json"]}), out)
        patched = read_report(out / "eval_creation_patch.json")
        assert patched.mode == "creation"
        assert patched.total_frames == 3
        assert not (out / "eval_creation_patch.csv").exists()

    def test_creation_report_carries_configured_environment(self, workspace):
        out, _ = workspace
        creation = dict(TINY_RUN["creation"], environment="outdoor-analog")
        run("eval", tiny_config(creation=creation, eval={"mode": "creation", "formats": ["json"]}), out)
        assert read_report(out / "eval_creation_patch.json").environment == "outdoor-analog"

    def test_clean_sweep_right_after_train(self, tmp_path):
        results = run_chain(tmp_path, "gen-data", "train", "eval")
        names = [p.name for p in results["eval"].artifacts]
        assert names == ["eval_disappearance_clean.csv", "eval_disappearance_clean.json"]
        assert results["eval"].summary[0].startswith("clean: ")
        assert read_report(tmp_path / "eval_disappearance_clean.json").total_frames == 3

    def test_without_perturbation_or_baseline_nothing_to_evaluate(self, tmp_path):
        run_chain(tmp_path, "gen-data", "train")
        with pytest.raises(MissingInputError, match="attack-disappear"):
            run("eval", tiny_config(eval={"clean_baseline": False}), tmp_path)

    def test_clean_baseline_optional(self, workspace):
        out, _ = workspace
        result = run("eval", tiny_config(eval={"clean_baseline": False, "formats": ["json"]}), out)
        assert [p.name for p in result.artifacts] == ["eval_disappearance_two-bar-sticker.json"]

    def test_transfer_reports(self, workspace):
        out, _ = workspace
        run("transfer", tiny_config(), out)
        transfer = json.loads((out / "transfer.json").read_text())
        assert transfer["source_tag"] != transfer["target_tag"]
        assert (out / "transfer_clean_source.csv").exists()
        assert (out / "transfer_target.csv").exists()


class TestRender:
    def test_frames_written(self, workspace):
        out, _ = workspace
        result = run("render", tiny_config(), out)
        assert [p.name for p in result.artifacts[:2]] == ["canonical.ppm", "canonical_mask.ppm"]
        frames = sorted((out / "frames").glob("frame_*.ppm"))
        assert [f.name for f in frames] == ["frame_000.ppm", "frame_001.ppm", "frame_002.ppm"]

    def test_renders_clean_without_perturbation(self, tmp_path):
        run("render", tiny_config(), tmp_path)
        assert read_ppm(tmp_path / "frames" / "frame_000.ppm").shape == (16, 16, 3)


class TestDispatch:
    def test_known_commands(self):
        assert sorted(COMMANDS) == [
            "attack-create", "attack-disappear", "eval", "gen-data", "render", "train", "transfer",
        ]

    def test_unknown_command(self, tmp_path):
        with pytest.raises(ValueError, match="Unknown command"):
            run("deploy", tiny_config(), tmp_path)

    def test_same_seed_same_bytes(self, workspace, tmp_path):
        out, _ = workspace
        run_chain(tmp_path, "gen-data", "train", "attack-disappear")
        for name in ("model.mdet", "perturbation.pert", "loss_trace.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_different_seed_changes_model(self, workspace, tmp_path):
        out, _ = workspace
        run_chain(tmp_path, "gen-data", "train", config=tiny_config(seed=6))
        assert (tmp_path / "model.mdet").read_bytes() != (out / "model.mdet").read_bytes()


class TestManifest:
    def test_relative_artifact_names(self, tmp_path):
        config = tiny_config()
        manifest = build_manifest("render", config, tmp_path, [tmp_path / "frames" / "frame_000.ppm"])
        assert manifest.artifacts == ["frames/frame_000.ppm"]
        assert manifest.seed == 5
        assert len(manifest.config_hash) == 64

    def test_written_as_json(self, tmp_path):
        manifest = build_manifest("gen-data", tiny_config(), tmp_path, [])
        path = write_manifest(manifest, tmp_path)
        assert json.loads(path.read_text())["command"] == "gen-data"

    def test_version_info(self):
        info = get_version_info()
        assert set(info) == {"app", "numpy", "python"}
        assert info["numpy"] == np.__version__
