# src/signforge/trainer.py
import logging
import math
from collections.abc import Sequence

import numpy as np

from signforge.gradcore import DiffGraph, reshape, sigmoid, softmax_channels, square, stack
from signforge.minidet import DetectorModel, LabeledScene, detect, forward, iou
from signforge.rng import Rng
from signforge.schemas import DetectorConfig

logger = logging.getLogger(__name__)

INIT_STREAM = 0x11
SHUFFLE_STREAM = 0x12

COORD_WEIGHT = 5.0
NO_OBJECT_WEIGHT = 0.5
MAX_GRAD_NORM = 5.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def build_targets(config: DetectorConfig, scene: LabeledScene) -> dict[str, np.ndarray]:
    """Responsibility assignment: the best-IoU anchor in the centre cell owns the object."""
    s, b, c = config.grid_size, config.boxes_per_cell, config.num_classes
    responsible = np.zeros((s, s, b))
    coords = np.zeros((s, s, b, 4))
    classes = np.zeros((s, s, b, c))
    for class_id, (cx, cy, w, h) in scene.objects:
        col = min(int(cx * s), s - 1)
        row = min(int(cy * s), s - 1)
        anchor_ious = [iou((0.0, 0.0, w, h), (0.0, 0.0, aw / s, ah / s)) for aw, ah in config.anchors]
        best = int(np.argmax(anchor_ious))
        aw, ah = config.anchors[best]
        responsible[row, col, best] = 1.0
        coords[row, col, best] = (cx * s - col, cy * s - row, math.log(w * s / aw), math.log(h * s / ah))
        classes[row, col, best] = 0.0
        classes[row, col, best, class_id] = 1.0
    return {
        "responsible": responsible,
        "coords": coords,
        "classes": classes,
    }


def composite_loss(model: DetectorModel, graph: DiffGraph, images: np.ndarray, targets: list[dict], params):
    """5 * coordinate MSE + objectness MSE + class MSE over one minibatch.

    Coordinate and class errors are averaged over responsible boxes. The
    objectness error is averaged separately over responsible boxes and over
    the remaining S*S*B cells, the latter weighted by NO_OBJECT_WEIGHT.
    """
    cfg = model.config
    n = images.shape[0]
    raw = forward(model, graph.constant(images), params)
    boxes = reshape(raw, (n, cfg.grid_size, cfg.grid_size, cfg.boxes_per_cell, cfg.box_fields))

    responsible = np.stack([t["responsible"] for t in targets])
    coord_target = np.stack([t["coords"] for t in targets])
    class_target = np.stack([t["classes"] for t in targets])
    n_responsible = max(responsible.sum(), 1.0)
    n_empty = max(responsible.size - responsible.sum(), 1.0)

    objectness = sigmoid(boxes[..., 0])
    coord_pred = stack(
        [sigmoid(boxes[..., 1]), sigmoid(boxes[..., 2]), boxes[..., 3], boxes[..., 4]], axis=-1
    )
    class_probs = softmax_channels(boxes[..., 5:])

    obj_error = square(objectness - responsible)
    coord_loss = (square(coord_pred - coord_target) * responsible[..., None]).sum() * (1.0 / n_responsible)
    obj_loss = (obj_error * responsible).sum() * (1.0 / n_responsible) + (
        obj_error * (1.0 - responsible)
    ).sum() * (NO_OBJECT_WEIGHT / n_empty)
    class_loss = (square(class_probs - class_target) * responsible[..., None]).sum() * (1.0 / n_responsible)
    return coord_loss * COORD_WEIGHT + obj_loss + class_loss


def clip_gradients(grads: list[np.ndarray], max_norm: float = MAX_GRAD_NORM) -> tuple[list[np.ndarray], float]:
    """Rescale `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


def train_toy(
    config: DetectorConfig,
    dataset: Sequence[LabeledScene],
    seed: int,
    epochs: int,
    lr: float = 0.01,
    batch_size: int = 16,
) -> DetectorModel:
    """Plain minibatch SGD; bit-reproducible for a given seed."""
    if not dataset:
        raise ValueError("Training dataset is empty")
    present = {class_id for scene in dataset for class_id, _ in scene.objects}
    missing = sorted(set(range(config.num_classes)) - present)
    if missing:
        raise ValueError(f"Training dataset has no scenes of classes {missing}")

    model = DetectorModel.initialize(config, Rng(seed, INIT_STREAM))
    if epochs == 0:
        return model

    weights = [w.copy() for w in model.weights]
    targets = [build_targets(config, scene) for scene in dataset]
    shuffler = Rng(seed, SHUFFLE_STREAM)
    trace: list[float] = []

    for epoch in range(epochs):
        order = shuffler.shuffle(list(range(len(dataset))))
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            graph = DiffGraph()
            params = [graph.leaf(w) for w in weights]
            images = np.stack([dataset[i].image for i in batch])
            loss = composite_loss(model, graph, images, [targets[i] for i in batch], params)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"Training diverged at epoch {epoch} step {steps}: loss={value}", trace
                )
            grads = graph.backward(loss)
            step, norm = clip_gradients([grads[p] for p in params])
            if not math.isfinite(norm):
                raise TrainingDivergedError(
                    f"Training diverged at epoch {epoch} step {steps}: gradient norm={norm}", trace
                )
            if norm > MAX_GRAD_NORM:
                logger.debug("epoch %d step %d gradient norm %.3f clipped to %.1f", epoch, steps, norm, MAX_GRAD_NORM)
            for w, g in zip(weights, step):
                w -= lr * g
            epoch_loss += value
            steps += 1
        trace.append(epoch_loss / steps)
        logger.info("train epoch %d/%d loss %.6f", epoch + 1, epochs, trace[-1])

    return DetectorModel(config, weights)


def detection_rate(model: DetectorModel, scenes: Sequence[LabeledScene], target_class: int) -> float:
    """Fraction of scenes containing `target_class` in which it is detected."""
    relevant = [s for s in scenes if any(c == target_class for c, _ in s.objects)]
    if not relevant:
        raise ValueError(f"No scenes contain class {target_class}")
    hits = sum(
        any(d.class_id == target_class for d in detect(model, scene.image))
        for scene in relevant
    )
    return hits / len(relevant)
