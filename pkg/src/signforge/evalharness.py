# src/signforge/evalharness.py
"""Frame-level evaluation of detectors under attack.

A disappearance frame succeeds when no target-class detection survives NMS;
a creation frame succeeds when at least one does. Location is not checked.
"""
import csv
import io
import logging
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Literal

import numpy as np

from signforge.config import eval_threads
from signforge.minidet import Detection, DetectorModel, detect
from signforge.rng import Rng
from signforge.scenegen import CanonicalObject, render_sweep
from signforge.schemas import (
    DetectionRecord,
    Environment,
    EvalReport,
    FrameRecord,
    SweepConfig,
    TransferReport,
)

logger = logging.getLogger(__name__)

ReportFormat = Literal["csv", "json"]
RATIO_FIELD = re.compile(r'("success_ratio": )([-+.eE0-9]+)')


def _detect_all(
    model: DetectorModel,
    frames: Sequence[np.ndarray],
    score_threshold: float | None,
    threads: int | None,
) -> list[list[Detection]]:
    threads = eval_threads() if threads is None else threads
    if threads < 1:
        raise ValueError(f"threads must be at least 1, got {threads}")
    if threads == 1 or len(frames) == 1:
        return [detect(model, frame, score_threshold) for frame in frames]
    # map() yields in submission order, so records stay in frame order
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda frame: detect(model, frame, score_threshold), frames))


def _evaluate(
    mode: Literal["disappearance", "creation"],
    model: DetectorModel,
    frames: Sequence[np.ndarray],
    target_class: int,
    environment: Environment,
    attack_tag: str,
    score_threshold: float | None,
    threads: int | None,
) -> EvalReport:
    if not frames:
        raise ValueError("Evaluation needs at least one frame")
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(f"target_class {target_class} is outside [0, {model.config.num_classes})")

    records = []
    successes = 0
    for index, detections in enumerate(_detect_all(model, frames, score_threshold, threads)):
        present = any(d.class_id == target_class for d in detections)
        if present == (mode == "creation"):
            successes += 1
        records.append(
            FrameRecord(
                frame=index,
                detections=tuple(DetectionRecord(**asdict(d)) for d in detections),
                target_detected=present,
            )
        )
        logger.debug("frame %d: %d detections, target %s", index, len(detections), present)

    report = EvalReport(
        mode=mode,
        environment=environment,
        detector_tag=model.tag,
        attack_tag=attack_tag,
        target_class=target_class,
        total_frames=len(frames),
        success_frames=successes,
        frames=tuple(records),
    )
    logger.info("%s %s [%s] on %s: %s", mode, attack_tag, environment, model.tag, report.summary_line())
    return report


def eval_disappearance(
    model: DetectorModel,
    frames: Sequence[np.ndarray],
    target_class: int,
    environment: Environment = "indoor-analog",
    attack_tag: str = "clean",
    score_threshold: float | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Success = frames in which the target class is not detected."""
    return _evaluate(
        "disappearance", model, frames, target_class, environment, attack_tag, score_threshold, threads
    )


def eval_creation(
    model: DetectorModel,
    frames: Sequence[np.ndarray],
    target_class: int,
    environment: Environment = "indoor-analog",
    attack_tag: str = "patch",
    score_threshold: float | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Success = frames in which the target class is (spuriously) detected."""
    return _evaluate(
        "creation", model, frames, target_class, environment, attack_tag, score_threshold, threads
    )


def eval_transfer(
    pert,
    obj: CanonicalObject,
    model_a: DetectorModel,
    model_b: DetectorModel,
    sweep: SweepConfig,
    backgrounds: Sequence[np.ndarray],
    rng: Rng,
    target_class: int,
    score_threshold: float | None = None,
    threads: int | None = None,
) -> TransferReport:
    """Render one sweep and run it through both detectors."""
    if model_a.tag == model_b.tag:
        raise ValueError(f"Transfer needs two different detectors, both are {model_a.tag}")
    frames = render_sweep(list(backgrounds), obj, pert, sweep, rng)
    attack_tag = pert.shape if pert is not None else "clean"
    reports = [
        eval_disappearance(
            model, frames, target_class, sweep.environment, attack_tag, score_threshold, threads
        )
        for model in (model_a, model_b)
    ]
    return TransferReport(
        source_tag=model_a.tag, target_tag=model_b.tag, source=reports[0], target=reports[1]
    )


def _format_detections(record: FrameRecord) -> str:
    return ";".join(f"{d.class_id}@{d.score:.4f}" for d in record.detections)


def format_csv(report: EvalReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["frame", "detections", "target_detected"])
    for record in report.frames:
        writer.writerow([record.frame, _format_detections(record), str(record.target_detected).lower()])
    return buffer.getvalue()


def _fixed_ratios(text: str) -> str:
    """Rewrite every success_ratio number with exactly 4 decimal places."""
    return RATIO_FIELD.sub(lambda m: f"{m.group(1)}{float(m.group(2)):.4f}", text)


def write_report(report: EvalReport | TransferReport, path: str | Path, fmt: ReportFormat) -> Path:
    path = Path(path)
    if fmt == "json":
        text = _fixed_ratios(report.model_dump_json(indent=2)) + "\n"
    elif fmt == "csv":
        if not isinstance(report, EvalReport):
            raise ValueError("CSV output is only defined for a single EvalReport")
        text = format_csv(report)
    else:
        raise ValueError(f"Unknown report format: {fmt}")
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"Could not write report to {path}: {e.strerror or e}") from e
    return path


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text())


def format_table(reports: Sequence[EvalReport]) -> str:
    """Grid of summary lines: one row per environment, one column per attack tag."""
    columns = list(dict.fromkeys(r.attack_tag for r in reports))
    rows = list(dict.fromkeys(r.environment for r in reports))
    cells = {(r.environment, r.attack_tag): r.summary_line() for r in reports}
    header = ["environment", *columns]
    body = [[env, *(cells.get((env, col), "-") for col in columns)] for env in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines) + "\n"
