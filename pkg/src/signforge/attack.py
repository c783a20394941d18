# src/signforge/attack.py
"""Disappearance and creation attacks against the toy detector.

Both attacks optimize a perturbation delta living in the canonical object
frame. Only M * delta ever reaches a scene; after every SGD step delta is
projected back to [-1, 1], onto the mask support, and onto the set where
object + delta stays printable in [0, 1].
"""
import csv
import io
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Literal

import numpy as np

from signforge.gradcore import (
    DiffGraph,
    Node,
    absolute,
    l2norm,
    logsumexp,
    prod,
    reduce_max_indexed,
    reshape,
    stack,
)
from signforge.minidet import (
    Decoded,
    DetectorModel,
    class_prob_map,
    decode,
    extract_box_conf,
    extract_class_prob_conditional,
    forward,
)
from signforge.rng import Rng
from signforge.scenegen import (
    CanonicalObject,
    SceneSample,
    compose_perturbed_scene,
    compose_scene,
    perturbed_image,
    sample_scene,
    warp_alpha,
)
from signforge.schemas import AttackConfig, CreationConfig, SceneDistribution

logger = logging.getLogger(__name__)

ShapeTag = Literal["octagon-poster", "two-bar-sticker", "patch"]

DISAPPEAR_STREAM = 0x21
CREATION_INIT_STREAM = 0x22
CREATION_STREAM = 0x23

PATCH_CLASS = -1
PATCH_BASE = 0.5
CREATION_GAIN = (0.9, 1.1)

PERT_MAGIC = b"PERT"
PERT_VERSION = 1


class OptimizationDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list["LossRecord"]):
        super().__init__(message)
        self.trace = trace


class PerturbationFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    mask: np.ndarray  # K x K, values in {0, 1}
    delta: np.ndarray  # K x K x 3, values in [-1, 1]
    shape: ShapeTag

    def __post_init__(self):
        if self.mask.shape != self.delta.shape[:2] or self.delta.ndim != 3:
            raise ValueError(
                f"Mask {self.mask.shape} and delta {self.delta.shape} must share spatial dims"
            )
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("Mask values must be 0 or 1")

    def applied(self) -> np.ndarray:
        return self.mask[..., None] * self.delta


@dataclass(frozen=True)
class PrintableSet:
    colors: np.ndarray = field(
        default_factory=lambda: np.array(list(product((0.0, 0.5, 1.0), repeat=3)))
    )

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.ndim != 2 or colors.shape[1] != 3 or colors.shape[0] == 0:
            raise ValueError(f"Printable set must be a nonempty P x 3 array, got shape {colors.shape}")
        if np.any(colors < 0.0) or np.any(colors > 1.0):
            raise ValueError("Printable colors must lie in [0, 1]")
        object.__setattr__(self, "colors", colors)


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    j_term: float
    tv_term: float
    nps_term: float

    @property
    def total(self) -> float:
        return self.j_term + self.tv_term + self.nps_term


# Masks


def make_mask(shape: ShapeTag, obj: CanonicalObject) -> np.ndarray:
    size = obj.size
    if shape == "octagon-poster":
        mask = obj.alpha.copy()
    elif shape == "two-bar-sticker":
        bars = np.zeros((size, size))
        c0, c1 = round(0.2 * size), round(0.8 * size)
        for lo, hi in ((0.22, 0.34), (0.66, 0.78)):
            bars[round(lo * size):round(hi * size), c0:c1] = 1.0
        mask = bars * obj.alpha
    elif shape == "patch":
        mask = np.ones((size, size))
    else:
        raise ValueError(f"Unknown mask shape: {shape}")
    mask.setflags(write=False)
    return mask


def patch_object(size: int) -> CanonicalObject:
    """A fully opaque mid-grey square that carries the creation patch."""
    image = np.full((size, size, 3), PATCH_BASE)
    alpha = np.ones((size, size))
    image.setflags(write=False)
    alpha.setflags(write=False)
    return CanonicalObject(image=image, alpha=alpha, class_id=PATCH_CLASS)


def zero_perturbation(shape: ShapeTag, obj: CanonicalObject) -> PerturbationSpec:
    return PerturbationSpec(mask=make_mask(shape, obj), delta=np.zeros(obj.image.shape), shape=shape)


def project(delta: np.ndarray, obj: CanonicalObject, mask: np.ndarray) -> np.ndarray:
    """Clip to [-1, 1], restrict to the mask, and keep object + delta in [0, 1]."""
    m = mask[..., None]
    d = np.clip(delta, -1.0, 1.0) * m
    return (np.clip(obj.image + d, 0.0, 1.0) - obj.image) * m


def printable_rendering(obj: CanonicalObject, pert: PerturbationSpec) -> np.ndarray:
    return np.clip(obj.image + pert.applied(), 0.0, 1.0)


# Loss terms


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else DiffGraph().constant(x)


def tv_norm(mask: np.ndarray, delta) -> Node:
    """Anisotropic total variation of M * delta over all valid neighbour pairs."""
    delta = _as_node(delta)
    if delta.shape[:2] != mask.shape:
        raise ValueError(f"Mask {mask.shape} and delta {delta.shape} must share spatial dims")
    m = mask if delta.ndim == mask.ndim else mask[..., None]
    a = delta * m
    vertical = absolute(a[1:] - a[:-1]).sum()
    horizontal = absolute(a[:, 1:] - a[:, :-1]).sum()
    return vertical + horizontal


def nps(delta_applied, printable: PrintableSet, mask: np.ndarray | None = None) -> Node:
    """Sum over masked pixels of the product of distances to every printable colour."""
    delta_applied = _as_node(delta_applied)
    if mask is None:
        pixels = reshape(delta_applied, (-1, 3))
    else:
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            return delta_applied.graph.constant(0.0)
        pixels = delta_applied[rows, cols]
    diffs = pixels[:, None, :] - printable.colors
    return prod(l2norm(diffs, axis=-1), axis=-1).sum()


def frame_of(decoded: Decoded, index: int) -> Decoded:
    """One image of a batched decode."""
    return Decoded(
        decoded.objectness[index],
        decoded.class_probs[index],
        decoded.boxes[index],
        decoded.config,
    )


def loss_disappearance(decoded: Decoded, target_class: int, temperature: float | None = None) -> Node:
    """Highest target-class score over every (cell, box) of one image."""
    scores = class_prob_map(decoded, target_class)
    if scores.ndim != 3:
        raise ValueError(f"loss_disappearance expects a single image, got scores of shape {scores.shape}")
    if temperature is not None:
        return logsumexp(scores, temperature)
    value, _ = reduce_max_indexed(scores)
    return value


def candidate_cells(footprint: np.ndarray, grid_size: int) -> list[tuple[int, int]]:
    """Grid cells whose pixel region intersects the nonzero footprint, row-major."""
    n = footprint.shape[0]
    if n % grid_size:
        raise ValueError(f"Footprint size {n} is not divisible by grid size {grid_size}")
    step = n // grid_size
    hit = (footprint > 0).reshape(grid_size, step, grid_size, step).any(axis=(1, 3))
    return [(int(r), int(c)) for r, c in zip(*np.nonzero(hit))]


def loss_creation(
    decoded: Decoded,
    candidates: Sequence[tuple[int, int]],
    target_class: int,
    tau: float,
) -> Node:
    """Localization phase while the best candidate box is at or below tau, then classification."""
    if not candidates:
        raise ValueError("loss_creation needs at least one candidate cell")
    best = None
    best_conf = -math.inf
    for cell in candidates:
        for b in range(decoded.config.boxes_per_cell):
            conf = extract_box_conf(decoded, cell, b).item()
            if conf > best_conf:
                best, best_conf = (cell, b), conf
    cell, b = best
    if best_conf <= tau:
        return -extract_box_conf(decoded, cell, b)
    return -extract_class_prob_conditional(decoded, cell, b, target_class)


def objective(
    model: DetectorModel,
    obj: CanonicalObject,
    samples: Sequence[SceneSample],
    mask: np.ndarray,
    delta: Node,
    config: AttackConfig,
    printable: PrintableSet | None = None,
) -> tuple[Node, dict[str, Node]]:
    """Weighted TV + weighted NPS + batch mean of the disappearance loss."""
    if not samples:
        raise ValueError("objective needs a nonempty scene batch")
    printable = printable or PrintableSet()
    image = perturbed_image(obj, mask, delta)
    scenes = stack([compose_scene(s.background, obj, s.transform, s.gain, image=image) for s in samples])
    decoded = decode(model, forward(model, scenes))
    per_scene = [
        loss_disappearance(frame_of(decoded, i), config.target_class, config.smooth_max_temperature)
        for i in range(len(samples))
    ]
    terms = {
        "j": stack(per_scene).mean(),
        "tv": tv_norm(mask, delta) * config.tv_weight,
        "nps": nps(delta * mask[..., None], printable, mask) * config.nps_weight,
    }
    return terms["j"] + terms["tv"] + terms["nps"], terms


# Optimizers


def _record(epoch: int, terms: dict[str, Node]) -> LossRecord:
    return LossRecord(epoch, terms["j"].item(), terms["tv"].item(), terms["nps"].item())


def _check_finite(record: LossRecord, trace: list[LossRecord]) -> None:
    if not math.isfinite(record.total):
        raise OptimizationDivergedError(
            f"Attack objective diverged at epoch {record.epoch}: total={record.total}", trace
        )


def optimize_disappearance(
    obj: CanonicalObject,
    init: PerturbationSpec,
    config: AttackConfig,
    model: DetectorModel,
    dist: SceneDistribution,
    backgrounds: Sequence[np.ndarray],
    seed: int,
    printable: PrintableSet | None = None,
) -> tuple[PerturbationSpec, list[LossRecord]]:
    if np.any(init.mask > obj.alpha):
        raise ValueError(f"Mask {init.shape!r} extends outside the object silhouette")
    if not backgrounds:
        raise ValueError("optimize_disappearance needs at least one background")
    printable = printable or PrintableSet()
    delta = project(init.delta, obj, init.mask)
    base = Rng(seed, DISAPPEAR_STREAM)
    trace: list[LossRecord] = []

    for epoch in range(config.epochs):
        epoch_rng = base.derive(epoch)
        samples = [sample_scene(dist, epoch_rng, list(backgrounds)) for _ in range(config.batch_size)]
        graph = DiffGraph()
        leaf = graph.leaf(delta)
        total, terms = objective(model, obj, samples, init.mask, leaf, config, printable)
        record = _record(epoch, terms)
        _check_finite(record, trace)
        grads = graph.backward(total)
        delta = project(delta - config.lr * grads[leaf], obj, init.mask)
        trace.append(record)
        logger.info(
            "disappear epoch %d/%d J=%.6f TV=%.6f NPS=%.6f",
            epoch + 1, config.epochs, record.j_term, record.tv_term, record.nps_term,
        )

    return PerturbationSpec(mask=init.mask, delta=delta, shape=init.shape), trace


def placement_distribution(creation: CreationConfig) -> SceneDistribution:
    low_x, high_x = creation.translate_x
    low_y, high_y = creation.translate_y
    half = creation.scale[1] / 2.0
    if low_x - half < 0.0 or high_x + half > 1.0 or low_y - half < 0.0 or high_y + half > 1.0:
        raise ValueError(
            f"Patch of scale up to {creation.scale[1]} does not fit in frame for translate ranges "
            f"{list(creation.translate_x)} x {list(creation.translate_y)}"
        )
    return SceneDistribution(
        rotation_deg=creation.rotation_deg,
        translate_x=creation.translate_x,
        translate_y=creation.translate_y,
        scale=creation.scale,
        gain=CREATION_GAIN,
    )


def initial_patch(creation: CreationConfig, seed: int) -> PerturbationSpec:
    obj = patch_object(creation.patch_size)
    shape = (creation.patch_size, creation.patch_size, 3)
    delta = Rng(seed, CREATION_INIT_STREAM).uniform_array(shape, -creation.init_range, creation.init_range)
    mask = make_mask("patch", obj)
    return PerturbationSpec(mask=mask, delta=project(delta, obj, mask), shape="patch")


def creation_objective(
    model: DetectorModel,
    patch: CanonicalObject,
    samples: Sequence[SceneSample],
    mask: np.ndarray,
    delta: Node,
    config: AttackConfig,
    printable: PrintableSet | None = None,
) -> tuple[Node, dict[str, Node]]:
    """Weighted TV + weighted NPS + batch mean of the creation loss."""
    printable = printable or PrintableSet()
    image = perturbed_image(patch, mask, delta)
    size = samples[0].background.shape[0]
    scenes = stack([compose_scene(s.background, patch, s.transform, s.gain, image=image) for s in samples])
    decoded = decode(model, forward(model, scenes))
    per_scene = []
    for i, s in enumerate(samples):
        cells = candidate_cells(warp_alpha(patch, s.transform, size), model.config.grid_size)
        per_scene.append(loss_creation(frame_of(decoded, i), cells, config.target_class, config.tau))
    terms = {
        "j": stack(per_scene).mean(),
        "tv": tv_norm(mask, delta) * config.tv_weight,
        "nps": nps(delta * mask[..., None], printable, mask) * config.nps_weight,
    }
    return terms["j"] + terms["tv"] + terms["nps"], terms


def optimize_creation(
    creation: CreationConfig,
    config: AttackConfig,
    model: DetectorModel,
    backgrounds: Sequence[np.ndarray],
    seed: int,
    init: PerturbationSpec | None = None,
    printable: PrintableSet | None = None,
) -> tuple[PerturbationSpec, list[LossRecord]]:
    if not backgrounds:
        raise ValueError("optimize_creation needs at least one background")
    dist = placement_distribution(creation)
    patch = patch_object(creation.patch_size)
    init = init or initial_patch(creation, seed)
    if init.delta.shape != patch.image.shape:
        raise ValueError(f"Patch init has shape {init.delta.shape}, expected {patch.image.shape}")
    printable = printable or PrintableSet()
    delta = project(init.delta, patch, init.mask)
    base = Rng(seed, CREATION_STREAM)
    trace: list[LossRecord] = []

    for epoch in range(creation.epochs):
        epoch_rng = base.derive(epoch)
        samples = [sample_scene(dist, epoch_rng, list(backgrounds)) for _ in range(creation.batch_size)]
        graph = DiffGraph()
        leaf = graph.leaf(delta)
        total, terms = creation_objective(model, patch, samples, init.mask, leaf, config, printable)
        record = _record(epoch, terms)
        _check_finite(record, trace)
        grads = graph.backward(total)
        delta = project(delta - creation.lr * grads[leaf], patch, init.mask)
        trace.append(record)
        logger.info(
            "create epoch %d/%d J=%.6f TV=%.6f NPS=%.6f",
            epoch + 1, creation.epochs, record.j_term, record.tv_term, record.nps_term,
        )

    return PerturbationSpec(mask=init.mask, delta=delta, shape="patch"), trace


def creation_frames(
    pert: PerturbationSpec | None,
    creation: CreationConfig,
    backgrounds: Sequence[np.ndarray],
    rng: Rng,
    count: int,
) -> list[np.ndarray]:
    """Held-out placements of the patch; with pert=None the bare backgrounds at the same gains."""
    dist = placement_distribution(creation)
    patch = patch_object(creation.patch_size)
    frames = []
    for i in range(count):
        sample = sample_scene(dist, rng.derive(i), list(backgrounds))
        if pert is None:
            frames.append(np.clip(sample.background * sample.gain, 0.0, 1.0))
        else:
            frames.append(compose_perturbed_scene(sample.background, patch, pert, sample.transform, sample.gain))
    return frames


# Artifacts


def encode_perturbation(delta: np.ndarray) -> bytes:
    header = PERT_MAGIC + struct.pack(f"<II{delta.ndim}I", PERT_VERSION, delta.ndim, *delta.shape)
    return header + np.ascontiguousarray(delta, dtype="<f8").tobytes()


def decode_perturbation(data: bytes) -> np.ndarray:
    if data[:4] != PERT_MAGIC:
        raise PerturbationFormatError(f"Bad magic {data[:4]!r}, expected {PERT_MAGIC!r}")
    try:
        version, ndim = struct.unpack_from("<II", data, 4)
        if version != PERT_VERSION:
            raise PerturbationFormatError(f"Unsupported perturbation version {version}")
        dims = struct.unpack_from(f"<{ndim}I", data, 12)
    except struct.error as e:
        raise PerturbationFormatError(f"Truncated perturbation header: {e}") from None
    offset = 12 + 4 * ndim
    count = math.prod(dims)
    if len(data) - offset != 8 * count:
        raise PerturbationFormatError(
            f"Payload holds {len(data) - offset} bytes, expected {8 * count} for dims {list(dims)}"
        )
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def save_perturbation(pert: PerturbationSpec, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_perturbation(pert.delta))
    return path


def load_perturbation(path: str | Path, shape: ShapeTag, obj: CanonicalObject) -> PerturbationSpec:
    delta = decode_perturbation(Path(path).read_bytes())
    if delta.shape != obj.image.shape:
        raise PerturbationFormatError(
            f"Perturbation in {path} has shape {delta.shape}, expected {obj.image.shape}"
        )
    mask = make_mask(shape, obj)
    return PerturbationSpec(mask=mask, delta=delta * mask[..., None], shape=shape)


def format_loss_trace(trace: Sequence[LossRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "J_term", "TV_term", "NPS_term", "total"])
    for r in trace:
        writer.writerow([r.epoch, repr(r.j_term), repr(r.tv_term), repr(r.nps_term), repr(r.total)])
    return buffer.getvalue()


def write_loss_trace(trace: Sequence[LossRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(format_loss_trace(trace))
    return path
