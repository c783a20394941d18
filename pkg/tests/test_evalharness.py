# tests/test_evalharness.py
import json
from unittest.mock import patch

import numpy as np
import pytest

from signforge.attack import PerturbationSpec, make_mask
from signforge.evalharness import (
    eval_creation,
    eval_disappearance,
    eval_transfer,
    format_csv,
    format_table,
    read_report,
    write_report,
)
from signforge.minidet import STOP_OCTAGON, Detection, DetectorModel
from signforge.rng import Rng
from signforge.scenegen import canonical_objects, make_background
from signforge.schemas import DetectorConfig, EvalReport, SweepConfig, TransferReport

TOY = DetectorConfig()


@pytest.fixture(scope="module")
def model():
    return DetectorModel.initialize(TOY, Rng(0))


def marked_frames(*classes: int | None) -> list[np.ndarray]:
    """Frames whose first pixel encodes which class the fake detector reports."""
    frames = []
    for class_id in classes:
        frame = np.zeros((112, 112, 3))
        frame[0, 0, 0] = -1.0 if class_id is None else class_id
        frames.append(frame)
    return frames


def fake_detect(model, frame, score_threshold=None):
    class_id = int(frame[0, 0, 0])
    if class_id < 0:
        return []
    return [Detection(class_id, 0.5 + 0.1 * class_id, (0.5, 0.5, 0.2, 0.2), (3, 3), 0)]


@pytest.fixture
def faked():
    with patch("signforge.evalharness.detect", side_effect=fake_detect) as mock:
        yield mock


class TestEvalDisappearance:
    def test_counts_frames_without_target(self, model, faked):
        report = eval_disappearance(model, marked_frames(0, None, 1, None), target_class=0, threads=1)
        assert (report.success_frames, report.total_frames) == (3, 4)
        assert [f.target_detected for f in report.frames] == [True, False, False, False]

    def test_no_detections_is_full_success(self, model, faked):
        report = eval_disappearance(model, marked_frames(None, None), target_class=0, threads=1)
        assert report.success_ratio == 1.0

    def test_report_metadata(self, model, faked):
        report = eval_disappearance(
            model, marked_frames(None), target_class=0, environment="outdoor-analog",
            attack_tag="two-bar-sticker", threads=1,
        )
        assert report.mode == "disappearance"
        assert report.environment == "outdoor-analog"
        assert report.attack_tag == "two-bar-sticker"
        assert report.detector_tag == model.tag

    def test_empty_sequence_rejected(self, model):
        with pytest.raises(ValueError, match="at least one frame"):
            eval_disappearance(model, [], target_class=0)

    def test_unknown_class_rejected(self, model):
        with pytest.raises(ValueError, match="target_class"):
            eval_disappearance(model, marked_frames(None), target_class=7)

    def test_threads_keep_frame_order(self, model, faked):
        classes = [i % 3 if i % 4 else None for i in range(13)]
        serial = eval_disappearance(model, marked_frames(*classes), target_class=1, threads=1)
        pooled = eval_disappearance(model, marked_frames(*classes), target_class=1, threads=4)
        assert pooled == serial
        assert [f.frame for f in pooled.frames] == list(range(13))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_ratio_independent_of_frame_order(self, model, faked, seed):
        classes = [i % 3 if i % 5 else None for i in range(17)]
        shuffled = Rng(seed).shuffle(classes)
        forward = eval_disappearance(model, marked_frames(*classes), target_class=0, threads=1)
        permuted = eval_disappearance(model, marked_frames(*shuffled), target_class=0, threads=1)
        assert permuted.success_frames == forward.success_frames
        assert permuted.success_ratio == forward.success_ratio
        assert permuted.summary_line() == forward.summary_line()

    def test_threads_default_from_environment(self, model, faked):
        with patch.dict("os.environ", {"SIGNFORGE_THREADS": "3"}):
            report = eval_disappearance(model, marked_frames(0, 1, 2), target_class=0)
        assert report.success_frames == 2

    def test_real_detector_runs_on_clean_sweep(self, model):
        obj = canonical_objects(64)[STOP_OCTAGON]
        report = eval_transfer(
            None, obj, model, DetectorModel.initialize(TOY, Rng(1)), SweepConfig(n_frames=2),
            [make_background(Rng(2), 112)], Rng(3), target_class=0, threads=1,
        )
        assert report.source.total_frames == report.target.total_frames == 2
        assert report.source.attack_tag == "clean"


class TestEvalCreation:
    def test_one_hit_of_four(self, model, faked):
        report = eval_creation(model, marked_frames(None, 2, 0, None), target_class=0, threads=1)
        assert report.success_ratio == 0.25
        assert report.mode == "creation"
        assert report.attack_tag == "patch"

    def test_ratio_independent_of_frame_order(self, model, faked):
        classes = [None, 2, 0, None, 0, 1, None]
        forward = eval_creation(model, marked_frames(*classes), target_class=0, threads=1)
        backward = eval_creation(model, marked_frames(*reversed(classes)), target_class=0, threads=1)
        assert backward.success_ratio == forward.success_ratio == 2 / 7


class TestEvalTransfer:
    def test_identical_detectors_rejected(self, model):
        with pytest.raises(ValueError, match="two different detectors"):
            eval_transfer(
                None, canonical_objects(64)[STOP_OCTAGON], model, model, SweepConfig(n_frames=1),
                [np.zeros((112, 112, 3))], Rng(1), target_class=0,
            )

    def test_both_detectors_see_the_same_frames(self, model, faked):
        other = DetectorModel.initialize(TOY, Rng(9))
        obj = canonical_objects(64)[STOP_OCTAGON]
        pert = PerturbationSpec(
            mask=make_mask("two-bar-sticker", obj), delta=np.zeros((64, 64, 3)), shape="two-bar-sticker"
        )
        report = eval_transfer(
            pert, obj, model, other, SweepConfig(n_frames=3), [make_background(Rng(4), 112)], Rng(5),
            target_class=0, threads=1,
        )
        source_frames = [call.args[1] for call in faked.call_args_list[:3]]
        target_frames = [call.args[1] for call in faked.call_args_list[3:]]
        for a, b in zip(source_frames, target_frames):
            np.testing.assert_array_equal(a, b)
        assert report.source.attack_tag == "two-bar-sticker"
        assert report.target_tag == other.tag


class TestReportFiles:
    def report(self, model, *classes):
        with patch("signforge.evalharness.detect", side_effect=fake_detect):
            return eval_disappearance(model, marked_frames(*classes), target_class=0, threads=1)

    def test_csv_rows(self, model):
        text = format_csv(self.report(model, 0, None, 2))
        assert text.splitlines() == [
            "frame,detections,target_detected",
            "0,0@0.5000,true",
            "1,,false",
            "2,2@0.7000,false",
        ]

    def test_csv_without_frames_is_header_only(self):
        report = EvalReport(
            mode="disappearance", environment="indoor-analog", detector_tag="x", target_class=0,
            total_frames=1, success_frames=1,
        )
        assert format_csv(report) == "frame,detections,target_detected\n"

    def test_json_round_trip(self, model, tmp_path):
        report = self.report(model, 0, None)
        path = write_report(report, tmp_path / "eval.json", "json")
        assert read_report(path) == report
        assert json.loads(path.read_text())["success_ratio"] == 0.5

    def test_json_ratios_have_four_decimals(self, model, tmp_path):
        report = self.report(model, 0, None)
        transfer = TransferReport(source_tag="a", target_tag="b", source=report, target=report)
        single = write_report(report, tmp_path / "eval.json", "json").read_text()
        paired = write_report(transfer, tmp_path / "transfer.json", "json").read_text()
        assert '"success_ratio": 0.5000' in single
        assert paired.count('"success_ratio": 0.5000') == 2

    def test_json_carries_frames_without_target(self, model, tmp_path):
        report = self.report(model, 0, None, 2, None)
        data = json.loads(write_report(report, tmp_path / "eval.json", "json").read_text())
        assert data["frames_without_target"] == 3
        assert data["frames_without_target"] == report.frames_without_target

    def test_transfer_json(self, model, tmp_path):
        report = self.report(model, None)
        transfer = TransferReport(source_tag="a", target_tag="b", source=report, target=report)
        path = write_report(transfer, tmp_path / "transfer.json", "json")
        assert TransferReport.model_validate_json(path.read_text()) == transfer

    def test_transfer_csv_rejected(self, model, tmp_path):
        report = self.report(model, None)
        transfer = TransferReport(source_tag="a", target_tag="b", source=report, target=report)
        with pytest.raises(ValueError, match="CSV"):
            write_report(transfer, tmp_path / "t.csv", "csv")

    def test_unknown_format(self, model, tmp_path):
        with pytest.raises(ValueError, match="Unknown report format"):
            write_report(self.report(model, None), tmp_path / "r.xml", "xml")

    def test_write_failure_names_path(self, model, tmp_path):
        target = tmp_path / "missing" / "eval.csv"
        with pytest.raises(OSError, match="missing/eval.csv"):
            write_report(self.report(model, None), target, "csv")


class TestFormatTable:
    def test_grid_layout(self):
        def summary(env, tag, success):
            return EvalReport(
                mode="disappearance", environment=env, detector_tag="d", attack_tag=tag,
                target_class=0, total_frames=4, success_frames=success,
            )

        table = format_table([
            summary("indoor-analog", "clean", 0),
            summary("indoor-analog", "two-bar-sticker", 3),
            summary("outdoor-analog", "clean", 1),
        ])
        lines = table.splitlines()
        assert lines[0].split() == ["environment", "clean", "two-bar-sticker"]
        assert lines[1].split() == ["indoor-analog", "0/4", "(0.0%)", "3/4", "(75.0%)"]
        assert lines[2].split() == ["outdoor-analog", "1/4", "(25.0%)", "-"]
