# tests/test_trainer.py
import math
from unittest.mock import patch

import numpy as np
import pytest

from signforge.gradcore import DiffGraph
from signforge.minidet import DetectorModel, LabeledScene
from signforge.rng import Rng
from signforge.scenegen import synth_dataset
from signforge.schemas import DetectorConfig, SceneDistribution
from signforge.trainer import (
    INIT_STREAM,
    MAX_GRAD_NORM,
    TrainingDivergedError,
    build_targets,
    clip_gradients,
    composite_loss,
    detection_rate,
    train_toy,
)

TINY = DetectorConfig(
    grid_size=2, boxes_per_cell=2, num_classes=4, input_size=8,
    anchors=((0.5, 0.5), (1.5, 1.5)), channels=(2, 2),
)


def tiny_dataset(count: int = 8) -> list[LabeledScene]:
    rng = Rng(31)
    scenes = []
    for i in range(count):
        box = (rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5))
        scenes.append(LabeledScene(image=rng.uniform_array((8, 8, 3)), objects=((i % 4, box),)))
    return scenes


class TestBuildTargets:
    def test_centre_cell_and_best_anchor(self):
        scene = LabeledScene(image=np.zeros((8, 8, 3)), objects=((2, (0.75, 0.25, 0.7, 0.7)),))
        targets = build_targets(TINY, scene)
        assert targets["responsible"].sum() == 1.0
        assert targets["responsible"][0, 1, 1] == 1.0
        assert targets["classes"][0, 1, 1].tolist() == [0.0, 0.0, 1.0, 0.0]
        tx, ty, tw, th = targets["coords"][0, 1, 1]
        assert (tx, ty) == pytest.approx((0.5, 0.5))
        assert tw == pytest.approx(math.log(0.7 * 2 / 1.5))

    def test_small_object_picks_small_anchor(self):
        scene = LabeledScene(image=np.zeros((8, 8, 3)), objects=((0, (0.25, 0.25, 0.2, 0.2)),))
        assert build_targets(TINY, scene)["responsible"][0, 0, 0] == 1.0


def batch_loss(model: DetectorModel, scenes: list[LabeledScene]) -> float:
    graph = DiffGraph()
    params = [graph.constant(w) for w in model.weights]
    images = np.stack([s.image for s in scenes])
    targets = [build_targets(model.config, s) for s in scenes]
    return composite_loss(model, graph, images, targets, params).item()


class TestCompositeLoss:
    def test_is_a_batch_mean(self):
        model = DetectorModel.initialize(TINY, Rng(2))
        scene = tiny_dataset(1)[0]
        assert batch_loss(model, [scene, scene, scene]) == pytest.approx(batch_loss(model, [scene]), rel=1e-12)


class TestClipGradients:
    def test_small_gradients_untouched(self):
        grads = [np.full((2, 2), 0.5), np.array([1.0])]
        clipped, norm = clip_gradients(grads, max_norm=5.0)
        assert norm == pytest.approx(math.sqrt(2.0))
        assert clipped is grads

    def test_large_gradients_rescaled_to_max_norm(self):
        grads = [np.full((3,), 100.0), np.full((2, 2), -50.0)]
        clipped, norm = clip_gradients(grads, max_norm=MAX_GRAD_NORM)
        assert norm > MAX_GRAD_NORM
        assert math.sqrt(sum(float(np.sum(g * g)) for g in clipped)) == pytest.approx(MAX_GRAD_NORM)
        # direction preserved
        assert clipped[0][0] / clipped[1][0, 0] == pytest.approx(-2.0)

    def test_non_finite_norm_reported(self):
        _, norm = clip_gradients([np.array([np.inf, 1.0])])
        assert not math.isfinite(norm)


class TestTrainToy:
    def test_zero_epochs_returns_seeded_init(self):
        model = train_toy(TINY, tiny_dataset(), seed=5, epochs=0)
        init = DetectorModel.initialize(TINY, Rng(5, INIT_STREAM))
        assert all(np.array_equal(a, b) for a, b in zip(model.weights, init.weights))

    def test_same_seed_bit_identical(self):
        a = train_toy(TINY, tiny_dataset(), seed=5, epochs=2, batch_size=3)
        b = train_toy(TINY, tiny_dataset(), seed=5, epochs=2, batch_size=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_training_changes_weights(self):
        trained = train_toy(TINY, tiny_dataset(), seed=5, epochs=1)
        init = train_toy(TINY, tiny_dataset(), seed=5, epochs=0)
        assert not all(np.array_equal(x, y) for x, y in zip(trained.weights, init.weights))

    def test_loss_decreases_on_fixed_batch(self):
        dataset = tiny_dataset()
        targets = [build_targets(TINY, s) for s in dataset]
        images = np.stack([s.image for s in dataset])
        before = train_toy(TINY, dataset, seed=5, epochs=0)
        after = train_toy(TINY, dataset, seed=5, epochs=20, lr=0.05, batch_size=8)

        def loss(model):
            graph = DiffGraph()
            params = [graph.constant(w) for w in model.weights]
            return composite_loss(model, graph, images, targets, params).item()

        assert loss(after) < loss(before)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_toy(TINY, [], seed=1, epochs=1)

    def test_missing_class_rejected(self):
        scenes = [s for s in tiny_dataset() if s.objects[0][0] != 3]
        with pytest.raises(ValueError, match=r"classes \[3\]"):
            train_toy(TINY, scenes, seed=1, epochs=1)

    def test_nan_loss_aborts_with_trace(self):
        def nan_loss(model, graph, images, targets, params):
            return graph.constant(float("nan"))

        with patch("signforge.trainer.composite_loss", nan_loss):
            with pytest.raises(TrainingDivergedError, match="epoch 0") as excinfo:
                train_toy(TINY, tiny_dataset(), seed=1, epochs=3)
        assert excinfo.value.trace == []


class TestDetectionRate:
    def test_requires_target_scenes(self):
        model = DetectorModel.initialize(TINY, Rng(1))
        scenes = [s for s in tiny_dataset() if s.objects[0][0] != 0]
        with pytest.raises(ValueError, match="No scenes"):
            detection_rate(model, scenes, 0)

    def test_rate_in_unit_interval(self):
        model = DetectorModel.initialize(TINY, Rng(1))
        rate = detection_rate(model, tiny_dataset(), 0)
        assert 0.0 <= rate <= 1.0


class TestReferenceArchitecture:
    def test_default_detector_trains_without_diverging(self):
        config = DetectorConfig()
        scenes = synth_dataset(48, SceneDistribution(), Rng(3), scene_size=config.input_size, canonical_size=64)
        before = batch_loss(DetectorModel.initialize(config, Rng(5, INIT_STREAM)), scenes[:16])
        model = train_toy(config, scenes, seed=5, epochs=1, lr=0.01, batch_size=16)
        assert all(np.all(np.isfinite(w)) for w in model.weights)
        after = batch_loss(model, scenes[:16])
        assert math.isfinite(after)
        assert after < before * 1.5
