# src/signforge/pipelines.py
"""One function per CLI command.

Every pipeline reads its inputs from and writes its artifacts to the run's
output directory, and returns the artifact paths plus any summary lines
the CLI should print.
"""
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from signforge.attack import (
    creation_frames,
    load_perturbation,
    make_mask,
    optimize_creation,
    optimize_disappearance,
    patch_object,
    printable_rendering,
    save_perturbation,
    write_loss_trace,
    zero_perturbation,
)
from signforge.evalharness import (
    eval_creation,
    eval_disappearance,
    eval_transfer,
    format_table,
    write_report,
)
from signforge.minidet import STOP_OCTAGON, DetectorModel, LabeledScene
from signforge.model_store import load_model, save_model
from signforge.ppm import write_ppm
from signforge.rng import Rng
from signforge.scenegen import canonical_objects, make_background, make_backgrounds, render_sweep, synth_dataset
from signforge.schemas import DetectorConfig, EvalReport, RunConfig
from signforge.trainer import detection_rate, train_toy

logger = logging.getLogger(__name__)

DetectorChoice = Literal["a", "b"]

DATASET_STREAM = 0x31
BACKGROUND_STREAM = 0x32
SWEEP_BACKGROUND_STREAM = 0x33
SWEEP_STREAM = 0x34
PLACEMENT_STREAM = 0x35

MASK_64 = (1 << 64) - 1


class MissingInputError(ValueError):
    pass


@dataclass
class RunResult:
    artifacts: list[Path] = field(default_factory=list)
    summary: list[str] = field(default_factory=list)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"Missing input {path}; run `signforge {producer}` first")
    return path


def _detector_config(config: RunConfig, detector: DetectorChoice) -> DetectorConfig:
    return config.detector if detector == "a" else config.detector_b


def _training_seed(config: RunConfig, detector: DetectorChoice) -> int:
    return config.seed if detector == "a" else (config.seed + 1) & MASK_64


def _model_path(config: RunConfig, out_dir: Path, detector: DetectorChoice) -> Path:
    return out_dir / (config.paths.model if detector == "a" else config.paths.model_b)


def _load_detector(config: RunConfig, out_dir: Path, detector: DetectorChoice) -> DetectorModel:
    return load_model(_require(_model_path(config, out_dir, detector), f"train --detector {detector}"))


def _sweep_background(config: RunConfig, size: int) -> np.ndarray:
    return make_background(Rng(config.seed, SWEEP_BACKGROUND_STREAM), size)


def _attack_backgrounds(config: RunConfig, size: int) -> list[np.ndarray]:
    return make_backgrounds(Rng(config.seed, BACKGROUND_STREAM), config.scene.n_backgrounds, size)


def _target_object(config: RunConfig):
    return canonical_objects(config.attack.canonical_size)[STOP_OCTAGON]


# Dataset files


def save_dataset(train: list[LabeledScene], holdout: list[LabeledScene], path: Path) -> Path:
    arrays = {}
    for prefix, scenes in (("train", train), ("holdout", holdout)):
        arrays[f"{prefix}_images"] = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 1, 1, 3))
        arrays[f"{prefix}_classes"] = np.array([s.objects[0][0] for s in scenes], dtype=np.int64)
        arrays[f"{prefix}_boxes"] = np.array([s.objects[0][1] for s in scenes], dtype=np.float64).reshape(-1, 4)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_dataset(path: Path) -> tuple[list[LabeledScene], list[LabeledScene]]:
    with np.load(path) as data:
        splits = []
        for prefix in ("train", "holdout"):
            splits.append([
                LabeledScene(image=image, objects=((int(class_id), tuple(float(v) for v in box)),))
                for image, class_id, box in zip(
                    data[f"{prefix}_images"], data[f"{prefix}_classes"], data[f"{prefix}_boxes"]
                )
            ])
    return splits[0], splits[1]


# Commands


def run_gen_data(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    total = config.training.n_scenes + config.training.holdout_scenes
    size = _detector_config(config, detector).input_size
    scenes = synth_dataset(
        total, config.scene, Rng(config.seed, DATASET_STREAM), size, config.attack.canonical_size
    )
    train, holdout = scenes[:config.training.n_scenes], scenes[config.training.n_scenes:]
    path = save_dataset(train, holdout, out_dir / config.paths.dataset)
    logger.info("wrote %d training and %d held-out scenes to %s", len(train), len(holdout), path)
    preview = write_ppm(scenes[0].image, out_dir / "scene_000.ppm")
    return RunResult(artifacts=[path, preview])


def run_train(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    det_config = _detector_config(config, detector)
    train, holdout = load_dataset(_require(out_dir / config.paths.dataset, "gen-data"))
    model = train_toy(
        det_config,
        train,
        _training_seed(config, detector),
        config.training.epochs,
        lr=config.training.lr,
        batch_size=config.training.batch_size,
    )
    path = save_model(model, _model_path(config, out_dir, detector))
    result = RunResult(artifacts=[path])
    if any(c == config.attack.target_class for s in holdout for c, _ in s.objects):
        rate = detection_rate(model, holdout, config.attack.target_class)
        result.summary.append(f"{model.tag} held-out target detection rate {rate:.4f}")
    logger.info("trained detector %s -> %s", model.tag, path)
    return result


def run_attack_disappear(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    model = _load_detector(config, out_dir, detector)
    obj = _target_object(config)
    init = zero_perturbation(config.attack.mask, obj)
    pert, trace = optimize_disappearance(
        obj,
        init,
        config.attack,
        model,
        config.scene,
        _attack_backgrounds(config, model.config.input_size),
        config.seed,
    )
    artifacts = [
        save_perturbation(pert, out_dir / config.paths.perturbation),
        write_ppm(printable_rendering(obj, pert), out_dir / "perturbation.ppm"),
        write_ppm(pert.mask, out_dir / "mask.ppm"),
        write_loss_trace(trace, out_dir / "loss_trace.csv"),
    ]
    summary = [f"final J_d {trace[-1].j_term:.4f}"] if trace else []
    return RunResult(artifacts=artifacts, summary=summary)


def run_attack_create(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    model = _load_detector(config, out_dir, detector)
    pert, trace = optimize_creation(
        config.creation,
        config.attack,
        model,
        _attack_backgrounds(config, model.config.input_size),
        config.seed,
    )
    patch = patch_object(config.creation.patch_size)
    artifacts = [
        save_perturbation(pert, out_dir / config.paths.patch),
        write_ppm(printable_rendering(patch, pert), out_dir / "patch.ppm"),
        write_loss_trace(trace, out_dir / "patch_loss_trace.csv"),
    ]
    return RunResult(artifacts=artifacts)


def _write_reports(config: RunConfig, report: EvalReport, out_dir: Path, stem: str) -> list[Path]:
    return [write_report(report, out_dir / f"{stem}.{fmt}", fmt) for fmt in config.eval.formats]


def _load_disappearance_pert(config: RunConfig, out_dir: Path):
    obj = _target_object(config)
    path = _require(out_dir / config.paths.perturbation, "attack-disappear")
    return load_perturbation(path, config.attack.mask, obj)


def run_eval(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    model = _load_detector(config, out_dir, detector)
    threshold = config.eval.score_threshold
    target = config.attack.target_class
    result = RunResult()
    reports = []

    if config.eval.mode == "disappearance":
        obj = _target_object(config)
        backgrounds = [_sweep_background(config, model.config.input_size)]
        runs = [(None, "clean")] if config.eval.clean_baseline else []
        if runs and not (out_dir / config.paths.perturbation).exists():
            logger.info("no perturbation at %s; evaluating the clean sweep only", out_dir / config.paths.perturbation)
        else:
            pert = _load_disappearance_pert(config, out_dir)
            runs.append((pert, pert.shape))
        for candidate, tag in runs:
            frames = render_sweep(backgrounds, obj, candidate, config.sweep, Rng(config.seed, SWEEP_STREAM))
            reports.append(
                eval_disappearance(model, frames, target, config.sweep.environment, tag, threshold)
            )
    else:
        patch = load_perturbation(
            _require(out_dir / config.paths.patch, "attack-create"),
            "patch",
            patch_object(config.creation.patch_size),
        )
        backgrounds = make_backgrounds(
            Rng(config.seed, SWEEP_BACKGROUND_STREAM), config.scene.n_backgrounds, model.config.input_size
        )
        runs = [(None, "clean")] if config.eval.clean_baseline else []
        runs.append((patch, "patch"))
        for candidate, tag in runs:
            frames = creation_frames(
                candidate, config.creation, backgrounds, Rng(config.seed, PLACEMENT_STREAM),
                config.creation.eval_placements,
            )
            reports.append(
                eval_creation(model, frames, target, config.creation.environment, tag, threshold)
            )

    for report in reports:
        result.artifacts.extend(
            _write_reports(config, report, out_dir, f"eval_{report.mode}_{report.attack_tag}")
        )
        result.summary.append(f"{report.attack_tag}: {report.summary_line()}")
    result.summary.append(format_table(reports).rstrip("\n"))
    return result


def run_transfer(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    model_a = _load_detector(config, out_dir, "a")
    model_b = _load_detector(config, out_dir, "b")
    obj = _target_object(config)
    pert = _load_disappearance_pert(config, out_dir)
    backgrounds = [_sweep_background(config, model_a.config.input_size)]
    result = RunResult()
    for candidate, stem in ((None, "transfer_clean"), (pert, "transfer")):
        report = eval_transfer(
            candidate, obj, model_a, model_b, config.sweep, backgrounds,
            Rng(config.seed, SWEEP_STREAM), config.attack.target_class, config.eval.score_threshold,
        )
        result.artifacts.append(write_report(report, out_dir / f"{stem}.json", "json"))
        if "csv" in config.eval.formats:
            result.artifacts.append(write_report(report.source, out_dir / f"{stem}_source.csv", "csv"))
            result.artifacts.append(write_report(report.target, out_dir / f"{stem}_target.csv", "csv"))
        result.summary.append(
            f"{stem} {report.source_tag}: {report.source.summary_line()}  "
            f"{report.target_tag}: {report.target.summary_line()}"
        )
    return result


def run_render(config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    obj = _target_object(config)
    pert_path = out_dir / config.paths.perturbation
    pert = load_perturbation(pert_path, config.attack.mask, obj) if pert_path.exists() else None
    size = _detector_config(config, detector).input_size
    frames = render_sweep(
        [_sweep_background(config, size)], obj, pert, config.sweep, Rng(config.seed, SWEEP_STREAM)
    )
    frame_dir = out_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [write_ppm(obj.image, out_dir / "canonical.ppm")]
    artifacts.append(write_ppm(make_mask(config.attack.mask, obj), out_dir / "canonical_mask.ppm"))
    artifacts.extend(write_ppm(frame, frame_dir / f"frame_{k:03d}.ppm") for k, frame in enumerate(frames))
    return RunResult(artifacts=artifacts)


COMMANDS: dict[str, Callable[[RunConfig, Path, DetectorChoice], RunResult]] = {
    "gen-data": run_gen_data,
    "train": run_train,
    "attack-disappear": run_attack_disappear,
    "attack-create": run_attack_create,
    "eval": run_eval,
    "transfer": run_transfer,
    "render": run_render,
}


def run(command: str, config: RunConfig, out_dir: Path, detector: DetectorChoice = "a") -> RunResult:
    try:
        pipeline = COMMANDS[command]
    except KeyError:
        raise ValueError(f"Unknown command: {command}") from None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("running %s (seed %d) into %s", command, config.seed, out_dir)
    return pipeline(config, out_dir, detector)
