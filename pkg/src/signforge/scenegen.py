# src/signforge/scenegen.py
"""Synthetic scenes: canonical shapes, procedural backgrounds, and affine placement.

A canonical object lives in a K x K frame. `transform_matrix` turns a
TransformSample into the 2x3 affine that places it in an N x N scene; the
same affine is used for the object, its alpha, and any perturbation on it.
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np

from signforge.gradcore import DiffGraph, Node, bilinear_warp, clip
from signforge.minidet import CIRCLE, RECTANGLE, STOP_OCTAGON, TRIANGLE, LabeledScene
from signforge.rng import Rng
from signforge.schemas import SceneDistribution, SweepConfig

if TYPE_CHECKING:
    from signforge.attack import PerturbationSpec


@dataclass(frozen=True)
class CanonicalObject:
    image: np.ndarray  # K x K x 3
    alpha: np.ndarray  # K x K, values in {0, 1}
    class_id: int

    @property
    def size(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class TransformSample:
    rotation_deg: float
    translate: tuple[float, float]  # object centre, normalized image coords
    scale: float  # object side / image side


@dataclass(frozen=True)
class SceneSample:
    """One expectation-over-transformation draw: where, how bright, on what."""
    background: np.ndarray
    transform: TransformSample
    gain: float


SWEEP_PRESETS = {
    "indoor-analog": {"rotation_jitter": 5.0, "gain": (0.9, 1.1), "lateral_drift": 0.25},
    "outdoor-analog": {"rotation_jitter": 25.0, "gain": (0.6, 1.4), "lateral_drift": 0.35},
}

_RED = (0.80, 0.08, 0.10)
_WHITE = (0.95, 0.95, 0.95)
_BLUE = (0.10, 0.30, 0.80)
_YELLOW = (0.95, 0.80, 0.10)
_DARK = (0.15, 0.15, 0.15)
_GREEN = (0.10, 0.60, 0.30)

# smallest object side in scene pixels; below this a warped shape can miss every pixel centre
MIN_OBJECT_PIXELS = 4.0
MAX_PLACEMENT_DRAWS = 8


def _unit_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates mapped to [-1, 1] (u right, v down)."""
    centre = (size - 1) / 2.0
    idx = (np.arange(size) - centre) / (size / 2.0)
    v, u = np.meshgrid(idx, idx, indexing="ij")
    return u, v


def octagon_region(u: np.ndarray, v: np.ndarray, apothem: float) -> np.ndarray:
    return (np.abs(u) <= apothem) & (np.abs(v) <= apothem) & (np.abs(u) + np.abs(v) <= apothem * math.sqrt(2.0))


def _paint(shape: tuple[int, int], region_colors: list[tuple[np.ndarray, tuple[float, float, float]]]) -> np.ndarray:
    image = np.zeros(shape + (3,))
    for region, color in region_colors:
        image[region] = color
    return image


@lru_cache(maxsize=16)
def canonical_objects(size: int = 64) -> dict[int, CanonicalObject]:
    """The four synthetic classes, rendered into a size x size frame."""
    u, v = _unit_grid(size)
    frame = (size, size)

    octagon = octagon_region(u, v, 0.95)
    inner = octagon_region(u, v, 0.83)
    band = (np.abs(v) <= 0.14) & (np.abs(u) <= 0.6)
    stop = _paint(frame, [(octagon, _WHITE), (inner, _RED), (band & inner, _WHITE)])

    disc = u ** 2 + v ** 2 <= 0.95 ** 2
    circle = _paint(frame, [(disc, _BLUE), (u ** 2 + v ** 2 <= 0.45 ** 2, _WHITE)])

    # upward triangle with apex at v = -0.9 and base at v = 0.85
    tri = (v <= 0.85) & (np.abs(u) <= (v + 0.9) / 1.75 * 0.95)
    tri_inner = (v <= 0.7) & (np.abs(u) <= (v + 0.6) / 1.75 * 0.95)
    triangle = _paint(frame, [(tri, _DARK), (tri_inner, _YELLOW)])

    rect = (np.abs(u) <= 0.95) & (np.abs(v) <= 0.6)
    rectangle = _paint(frame, [(rect, _GREEN), ((np.abs(u) <= 0.8) & (np.abs(v) <= 0.1), _WHITE)])

    objects = {}
    for class_id, image, alpha in (
        (STOP_OCTAGON, stop, octagon),
        (CIRCLE, circle, disc),
        (TRIANGLE, triangle, tri),
        (RECTANGLE, rectangle, rect),
    ):
        image.setflags(write=False)
        alpha = alpha.astype(np.float64)
        alpha.setflags(write=False)
        objects[class_id] = CanonicalObject(image=image, alpha=alpha, class_id=class_id)
    return objects


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Separable linear interpolation of a g x g x C grid to size x size x C."""
    g = grid.shape[0]
    pos = np.linspace(0.0, g - 1, size)
    lo = np.minimum(np.floor(pos).astype(np.int64), g - 2)
    frac = pos - lo
    rows = grid[lo] * (1.0 - frac)[:, None, None] + grid[lo + 1] * frac[:, None, None]
    return rows[:, lo] * (1.0 - frac)[None, :, None] + rows[:, lo + 1] * frac[None, :, None]


def make_background(rng: Rng, size: int) -> np.ndarray:
    """Flat colour + low-frequency noise + up to three greyish distractor rectangles."""
    base = np.array([rng.uniform(0.2, 0.8) for _ in range(3)])
    noise = _upsample(rng.normal_array((4, 4, 3), std=0.08), size)
    image = base + noise
    for _ in range(rng.integers(4)):
        w = int(rng.uniform(0.05, 0.2) * size) + 1
        h = int(rng.uniform(0.05, 0.2) * size) + 1
        x = rng.integers(size - w + 1)
        y = rng.integers(size - h + 1)
        grey = rng.uniform(0.2, 0.8)
        tint = np.array([rng.uniform(-0.05, 0.05) for _ in range(3)])
        image[y:y + h, x:x + w] = grey + tint
    return np.clip(image, 0.0, 1.0)


def make_backgrounds(rng: Rng, count: int, size: int) -> list[np.ndarray]:
    return [make_background(rng.derive(i), size) for i in range(count)]


def sample_transform(dist: SceneDistribution, rng: Rng) -> TransformSample:
    rotation = rng.uniform(*dist.rotation_deg)
    tx = rng.uniform(*dist.translate_x)
    ty = rng.uniform(*dist.translate_y)
    scale = rng.uniform(*dist.scale)
    return TransformSample(rotation_deg=rotation, translate=(tx, ty), scale=scale)


def sample_scene(dist: SceneDistribution, rng: Rng, backgrounds: list[np.ndarray]) -> SceneSample:
    transform = sample_transform(dist, rng)
    gain = rng.uniform(*dist.gain)
    background = backgrounds[rng.integers(len(backgrounds))]
    return SceneSample(background=background, transform=transform, gain=gain)


def transform_matrix(t: TransformSample, canonical_size: int, scene_size: int) -> np.ndarray:
    """2x3 affine taking canonical pixel coordinates to scene pixel coordinates."""
    if t.scale <= 0:
        raise ValueError(f"Transform scale must be positive, got {t.scale}")
    factor = t.scale * scene_size / canonical_size
    theta = math.radians(t.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    linear = factor * np.array([[cos, sin], [-sin, cos]])
    src_centre = np.full(2, (canonical_size - 1) / 2.0)
    dst_centre = np.array([t.translate[0] * scene_size - 0.5, t.translate[1] * scene_size - 0.5])
    offset = dst_centre - linear @ src_centre
    return np.concatenate([linear, offset[:, None]], axis=1)


def warp_alpha(obj: CanonicalObject, t: TransformSample, scene_size: int) -> np.ndarray:
    matrix = transform_matrix(t, obj.size, scene_size)
    graph = DiffGraph()
    return bilinear_warp(graph.constant(obj.alpha[..., None]), matrix, (scene_size, scene_size)).value[..., 0]


def compose_scene(
    background: np.ndarray,
    obj: CanonicalObject,
    t: TransformSample,
    gain: float,
    image: Node | None = None,
) -> Node:
    """gain * (alpha * object + (1 - alpha) * background), clipped to [0, 1].

    `image` replaces the object's canonical pixels (e.g. a perturbed copy on
    a tape) and must be K x K x 3; the result is differentiable in it.
    """
    size = background.shape[0]
    if background.shape != (size, size, 3):
        raise ValueError(f"Background must be N x N x 3, got shape {background.shape}")
    graph = image.graph if image is not None else DiffGraph()
    pixels = image if image is not None else graph.constant(obj.image)
    matrix = transform_matrix(t, obj.size, size)
    warped = bilinear_warp(pixels, matrix, (size, size))
    alpha = bilinear_warp(graph.constant(obj.alpha[..., None]), matrix, (size, size)).value
    blended = warped * alpha + background * (1.0 - alpha)
    return clip(blended * gain, 0.0, 1.0)


def perturbed_image(obj: CanonicalObject, mask: np.ndarray, delta: Node) -> Node:
    """Canonical object pixels with M * delta painted on, clipped to [0, 1]."""
    return clip(delta * mask[..., None] + obj.image, 0.0, 1.0)


def align_perturbation(pert: "PerturbationSpec", t: TransformSample, scene_size: int) -> np.ndarray:
    """Warp M * delta into scene coordinates with the object's own affine."""
    matrix = transform_matrix(t, pert.delta.shape[0], scene_size)
    applied = pert.mask[..., None] * pert.delta
    return bilinear_warp(DiffGraph().constant(applied), matrix, (scene_size, scene_size)).value


def compose_perturbed_scene(
    background: np.ndarray,
    obj: CanonicalObject,
    pert: "PerturbationSpec | None",
    t: TransformSample,
    gain: float,
) -> np.ndarray:
    if pert is None:
        return compose_scene(background, obj, t, gain).value
    graph = DiffGraph()
    image = perturbed_image(obj, pert.mask, graph.constant(pert.delta))
    return compose_scene(background, obj, t, gain, image=image).value


def tight_box(alpha: np.ndarray) -> tuple[float, float, float, float] | None:
    """Normalized (cx, cy, w, h) bounding the nonzero pixels of `alpha`."""
    rows, cols = np.nonzero(alpha)
    if rows.size == 0:
        return None
    h, w = alpha.shape
    x0, x1 = cols.min(), cols.max() + 1
    y0, y1 = rows.min(), rows.max() + 1
    return ((x0 + x1) / 2.0 / w, (y0 + y1) / 2.0 / h, (x1 - x0) / w, (y1 - y0) / h)


def _visible_placement(
    obj: CanonicalObject, dist: SceneDistribution, rng: Rng, scene_size: int
) -> tuple[TransformSample, tuple[float, float, float, float]]:
    """A transform whose warped silhouette covers at least one scene pixel.

    The scale is floored at MIN_OBJECT_PIXELS scene pixels; draws that still
    come out empty are redrawn from the same generator.
    """
    floor = MIN_OBJECT_PIXELS / scene_size
    for _ in range(MAX_PLACEMENT_DRAWS):
        t = sample_transform(dist, rng)
        if t.scale < floor:
            t = TransformSample(rotation_deg=t.rotation_deg, translate=t.translate, scale=floor)
        box = tight_box(warp_alpha(obj, t, scene_size))
        if box is not None:
            return t, box
    raise ValueError(
        f"Scene distribution produced no visible object in {MAX_PLACEMENT_DRAWS} draws "
        f"(scale {list(dist.scale)}, scene size {scene_size})"
    )


def synth_dataset(
    n: int,
    dist: SceneDistribution,
    rng: Rng,
    scene_size: int = 112,
    canonical_size: int = 64,
) -> list[LabeledScene]:
    """One uniformly drawn shape per scene on a fresh procedural background."""
    if n < 1:
        raise ValueError(f"Dataset size must be at least 1, got {n}")
    objects = canonical_objects(canonical_size)
    scenes = []
    for i in range(n):
        scene_rng = rng.derive(i)
        obj = objects[scene_rng.integers(len(objects))]
        t, box = _visible_placement(obj, dist, scene_rng, scene_size)
        gain = scene_rng.uniform(*dist.gain)
        background = make_background(scene_rng, scene_size)
        image = compose_scene(background, obj, t, gain).value
        scenes.append(LabeledScene(image=np.array(image), objects=((obj.class_id, box),)))
    return scenes


def resolve_sweep(sweep: SweepConfig) -> tuple[float, tuple[float, float], float]:
    """(rotation jitter, gain range, lateral drift) with environment presets filled in."""
    preset = SWEEP_PRESETS[sweep.environment]
    rotation = preset["rotation_jitter"] if sweep.rotation_jitter is None else sweep.rotation_jitter
    gain = preset["gain"] if sweep.gain is None else sweep.gain
    drift = preset["lateral_drift"] if sweep.lateral_drift is None else sweep.lateral_drift
    return rotation, gain, drift


def plan_sweep(sweep: SweepConfig, rng: Rng) -> list[tuple[TransformSample, float]]:
    """Per-frame (transform, gain) for an approach from s_far to s_near."""
    rotation_jitter, gain_range, drift = resolve_sweep(sweep)
    plan = []
    n = sweep.n_frames
    for k in range(n):
        frame_rng = rng.derive(k)
        frac = k / (n - 1) if n > 1 else 0.0
        scale = sweep.s_far * (sweep.s_near / sweep.s_far) ** frac
        rotation = frame_rng.uniform(-rotation_jitter, rotation_jitter)
        tx = 0.5 + drift * frac + frame_rng.uniform(-sweep.translate_jitter, sweep.translate_jitter)
        ty = 0.5 + frame_rng.uniform(-sweep.translate_jitter, sweep.translate_jitter)
        gain = frame_rng.uniform(*gain_range)
        plan.append((TransformSample(rotation_deg=rotation, translate=(tx, ty), scale=scale), gain))
    return plan


def render_sweep(
    backgrounds: list[np.ndarray],
    obj: CanonicalObject,
    pert: "PerturbationSpec | None",
    sweep: SweepConfig,
    rng: Rng,
) -> list[np.ndarray]:
    """Frames of a simulated approach video; frame k uses backgrounds[k % len]."""
    if not backgrounds:
        raise ValueError("render_sweep needs at least one background")
    return [
        compose_perturbed_scene(backgrounds[k % len(backgrounds)], obj, pert, t, gain)
        for k, (t, gain) in enumerate(plan_sweep(sweep, rng))
    ]
