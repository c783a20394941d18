# src/signforge/minidet.py
"""Toy single-shot detector with the YOLO v2 output contract.

The network maps an input_size x input_size x 3 image to an S x S x B*(5+C)
tensor. Each box slot holds (t_o, t_x, t_y, t_w, t_h, class logits...).
"""
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from signforge.gradcore import (
    DiffGraph,
    Node,
    conv2d,
    exp,
    leaky_relu,
    max_pool2d,
    reshape,
    sigmoid,
    softmax_channels,
    stack,
)
from signforge.rng import Rng
from signforge.schemas import DetectorConfig

LEAKY_ALPHA = 0.1

# Class ids of the synthetic world; 0 is the attack target.
STOP_OCTAGON = 0
CIRCLE = 1
TRIANGLE = 2
RECTANGLE = 3
CLASS_NAMES = ("stop-octagon", "circle", "triangle", "rectangle")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # cx, cy, w, h in [0, 1] image coords
    cell: tuple[int, int]  # row, col
    box_index: int


@dataclass(frozen=True)
class LabeledScene:
    image: np.ndarray
    objects: tuple[tuple[int, tuple[float, float, float, float]], ...]


@dataclass(frozen=True)
class Decoded:
    objectness: Node  # (..., S, S, B)
    class_probs: Node  # (..., S, S, B, C)
    boxes: Node  # (..., S, S, B, 4)
    config: DetectorConfig


def weight_shapes(config: DetectorConfig) -> list[tuple[int, ...]]:
    """Kernel and bias shapes in declaration order."""
    shapes: list[tuple[int, ...]] = []
    cin = 3
    for cout in config.channels:
        shapes.append((3, 3, cin, cout))
        shapes.append((cout,))
        cin = cout
    shapes.append((1, 1, cin, config.output_channels))
    shapes.append((config.output_channels,))
    return shapes


class DetectorModel:
    def __init__(self, config: DetectorConfig, weights: list[np.ndarray]):
        expected = weight_shapes(config)
        if [w.shape for w in weights] != expected:
            raise ValueError(
                f"Weight shapes {[w.shape for w in weights]} do not match architecture {expected}"
            )
        self.config = config
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        for w in self.weights:
            w.setflags(write=False)

    @classmethod
    def initialize(cls, config: DetectorConfig, rng: Rng) -> "DetectorModel":
        """He-initialized kernels, zero biases."""
        weights = []
        for shape in weight_shapes(config):
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
                weights.append(rng.normal_array(shape, std=math.sqrt(2.0 / fan_in)))
            else:
                weights.append(np.zeros(shape))
        return cls(config, weights)

    @property
    def architecture(self) -> str:
        return self.config.architecture_tag

    @property
    def tag(self) -> str:
        digest = hashlib.sha256()
        for w in self.weights:
            digest.update(w.astype("<f8").tobytes())
        return f"{self.architecture}@{digest.hexdigest()[:8]}"


def forward(model: DetectorModel, image, params: list[Node] | None = None) -> Node:
    """Raw S x S x B*(5+C) output; accepts H x W x 3 or N x H x W x 3."""
    x = image if isinstance(image, Node) else DiffGraph().constant(image)
    cfg = model.config
    if x.ndim not in (3, 4) or x.shape[-3:] != (cfg.input_size, cfg.input_size, 3):
        raise ValueError(
            f"Detector expects {cfg.input_size}x{cfg.input_size}x3 input, got shape {x.shape}"
        )
    graph = x.graph
    if params is None:
        params = [graph.constant(w) for w in model.weights]

    h = x
    for i in range(len(cfg.channels)):
        h = conv2d(h, params[2 * i], stride=1, padding=1) + params[2 * i + 1]
        h = leaky_relu(h, LEAKY_ALPHA)
        if i < cfg.pool_blocks:
            h = max_pool2d(h, 2)
    return conv2d(h, params[-2], stride=1, padding=0) + params[-1]


def decode(model: DetectorModel, raw: Node) -> Decoded:
    cfg = model.config
    s, b, f = cfg.grid_size, cfg.boxes_per_cell, cfg.box_fields
    if raw.shape[-3:] != (s, s, b * f):
        raise ValueError(f"Raw output must end in {(s, s, b * f)}, got shape {raw.shape}")
    boxes = reshape(raw, raw.shape[:-1] + (b, f))

    objectness = sigmoid(boxes[..., 0])
    class_probs = softmax_channels(boxes[..., 5:])

    cols = np.arange(s, dtype=np.float64)[None, :, None]
    rows = np.arange(s, dtype=np.float64)[:, None, None]
    anchors = np.asarray(cfg.anchors, dtype=np.float64)
    cx = (sigmoid(boxes[..., 1]) + cols) * (1.0 / s)
    cy = (sigmoid(boxes[..., 2]) + rows) * (1.0 / s)
    w = exp(boxes[..., 3]) * (anchors[:, 0] / s)
    h = exp(boxes[..., 4]) * (anchors[:, 1] / s)
    return Decoded(objectness, class_probs, stack([cx, cy, w, h], axis=-1), cfg)


def _check_indices(decoded: Decoded, cell: tuple[int, int], box: int, y: int | None = None) -> None:
    cfg = decoded.config
    row, col = cell
    if not (0 <= row < cfg.grid_size and 0 <= col < cfg.grid_size):
        raise ValueError(f"Cell {cell} is outside the {cfg.grid_size}x{cfg.grid_size} grid")
    if not 0 <= box < cfg.boxes_per_cell:
        raise ValueError(f"Box index {box} is outside [0, {cfg.boxes_per_cell})")
    if y is not None and not 0 <= y < cfg.num_classes:
        raise ValueError(f"Class {y} is outside [0, {cfg.num_classes})")


def extract_class_prob(decoded: Decoded, cell: tuple[int, int], box: int, y: int) -> Node:
    """Class-y probability of box `box` in `cell`.

    With class_prob_mode "product" this is objectness x conditional class
    probability (the detection score); "conditional" drops the objectness.
    """
    _check_indices(decoded, cell, box, y)
    row, col = cell
    prob = decoded.class_probs[..., row, col, box, y]
    if decoded.config.class_prob_mode == "conditional":
        return prob
    return decoded.objectness[..., row, col, box] * prob


def extract_class_prob_conditional(decoded: Decoded, cell: tuple[int, int], box: int, y: int) -> Node:
    _check_indices(decoded, cell, box, y)
    row, col = cell
    return decoded.class_probs[..., row, col, box, y]


def extract_box_conf(decoded: Decoded, cell: tuple[int, int], box: int) -> Node:
    _check_indices(decoded, cell, box)
    row, col = cell
    return decoded.objectness[..., row, col, box]


def class_prob_map(decoded: Decoded, y: int) -> Node:
    """extract_class_prob for every (cell, box) at once: shape (..., S, S, B)."""
    if not 0 <= y < decoded.config.num_classes:
        raise ValueError(f"Class {y} is outside [0, {decoded.config.num_classes})")
    prob = decoded.class_probs[..., y]
    if decoded.config.class_prob_mode == "conditional":
        return prob
    return decoded.objectness * prob


def iou(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; ties broken by cell then box index."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    ordered = sorted(detections, key=lambda d: (-d.score, d.cell, d.box_index))
    kept: list[Detection] = []
    for det in ordered:
        if all(
            iou(det.box, other.box) < iou_threshold
            for other in kept
            if other.class_id == det.class_id
        ):
            kept.append(det)
    return kept


def threshold_boxes(
    objectness: np.ndarray,
    class_probs: np.ndarray,
    boxes: np.ndarray,
    score_threshold: float,
) -> list[Detection]:
    """Boxes whose objectness x best-class probability is not below the threshold."""
    best = class_probs.argmax(axis=-1)
    best_prob = np.take_along_axis(class_probs, best[..., None], axis=-1)[..., 0]
    scores = objectness * best_prob
    detections = []
    for row, col, b in zip(*np.nonzero(scores >= score_threshold)):
        detections.append(
            Detection(
                class_id=int(best[row, col, b]),
                score=float(scores[row, col, b]),
                box=tuple(float(v) for v in boxes[row, col, b]),
                cell=(int(row), int(col)),
                box_index=int(b),
            )
        )
    return detections


def detect_raw(model: DetectorModel, raw: np.ndarray, score_threshold: float | None = None) -> list[Detection]:
    """Decode, threshold and suppress a single image's raw output tensor."""
    cfg = model.config
    threshold = cfg.score_threshold if score_threshold is None else score_threshold
    decoded = decode(model, DiffGraph().constant(raw))
    if decoded.objectness.ndim != 3:
        raise ValueError(f"detect expects a single image, got raw shape {raw.shape}")
    candidates = threshold_boxes(
        decoded.objectness.value,
        decoded.class_probs.value,
        decoded.boxes.value,
        threshold,
    )
    return nms(candidates, cfg.nms_iou_threshold)


def detect(model: DetectorModel, image: np.ndarray, score_threshold: float | None = None) -> list[Detection]:
    return detect_raw(model, forward(model, image).value, score_threshold)
