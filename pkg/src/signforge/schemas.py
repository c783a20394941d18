# src/signforge/schemas.py
import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_serializer, model_validator

Range = tuple[float, float]
Environment = Literal["indoor-analog", "outdoor-analog"]
MaskShape = Literal["octagon-poster", "two-bar-sticker"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_range(name: str, value: Range) -> None:
    low, high = value
    if not (math.isfinite(low) and math.isfinite(high)) or low > high:
        raise ValueError(f"{name} must be a finite [low, high] range, got {list(value)}")


class DetectorConfig(_Strict):
    grid_size: int = Field(default=7, ge=1)
    boxes_per_cell: int = Field(default=2, ge=1)
    num_classes: int = Field(default=4, ge=1)
    input_size: int = Field(default=112, ge=1)
    anchors: tuple[tuple[float, float], ...] = ((1.0, 1.0), (2.5, 2.5))
    score_threshold: float = Field(default=0.1, gt=0.0, lt=1.0)
    nms_iou_threshold: float = Field(default=0.45, gt=0.0, lt=1.0)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    class_prob_mode: Literal["product", "conditional"] = "product"

    @model_validator(mode="after")
    def validate_geometry(self) -> "DetectorConfig":
        if self.input_size % self.grid_size:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by grid_size {self.grid_size}"
            )
        stride = self.input_size // self.grid_size
        if stride & (stride - 1):
            raise ValueError(f"input_size / grid_size must be a power of two, got {stride}")
        if self.pool_blocks > len(self.channels):
            raise ValueError(
                f"{self.pool_blocks} pooling blocks needed but only {len(self.channels)} channel stages given"
            )
        if len(self.anchors) != self.boxes_per_cell:
            raise ValueError(
                f"Expected {self.boxes_per_cell} anchors, got {len(self.anchors)}"
            )
        if any(aw <= 0 or ah <= 0 for aw, ah in self.anchors):
            raise ValueError("Anchor sizes must be positive")
        if any(c < 1 for c in self.channels):
            raise ValueError("Channel counts must be positive")
        return self

    @property
    def pool_blocks(self) -> int:
        return (self.input_size // self.grid_size).bit_length() - 1

    @property
    def box_fields(self) -> int:
        return 5 + self.num_classes

    @property
    def output_channels(self) -> int:
        return self.boxes_per_cell * self.box_fields

    @property
    def architecture_tag(self) -> str:
        return "conv-" + "-".join(str(c) for c in self.channels)


class SceneDistribution(_Strict):
    rotation_deg: Range = (-30.0, 30.0)
    translate_x: Range = (0.2, 0.8)
    translate_y: Range = (0.2, 0.8)
    scale: Range = (0.08, 0.6)
    gain: Range = (0.6, 1.4)
    n_backgrounds: int = Field(default=32, ge=1)

    @model_validator(mode="after")
    def validate_ranges(self) -> "SceneDistribution":
        for name in ("rotation_deg", "translate_x", "translate_y", "scale", "gain"):
            _check_range(name, getattr(self, name))
        low, high = self.scale
        if low <= 0.0 or high > 1.0:
            raise ValueError(f"scale range must lie within (0, 1], got {list(self.scale)}")
        if self.gain[0] <= 0.0:
            raise ValueError("gain range must be positive")
        return self


class TrainingConfig(_Strict):
    n_scenes: int = Field(default=2000, ge=1)
    holdout_scenes: int = Field(default=200, ge=0)
    epochs: int = Field(default=10, ge=0)
    lr: float = Field(default=0.01, gt=0.0)
    batch_size: int = Field(default=16, ge=1)


class AttackConfig(_Strict):
    tv_weight: float = Field(default=1e-4, ge=0.0)
    nps_weight: float = Field(default=0.0, ge=0.0)
    tau: float = Field(default=0.2, gt=0.0, lt=1.0)
    target_class: int = Field(default=0, ge=0)
    epochs: int = Field(default=500, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=0.05, gt=0.0)
    mask: MaskShape = "two-bar-sticker"
    smooth_max_temperature: float | None = Field(default=None, gt=0.0)
    canonical_size: int = Field(default=64, ge=8)


class CreationConfig(_Strict):
    patch_size: int = Field(default=32, ge=4)
    epochs: int = Field(default=800, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=0.05, gt=0.0)
    init_range: float = Field(default=0.25, ge=0.0, le=1.0)
    rotation_deg: Range = (-20.0, 20.0)
    translate_x: Range = (0.25, 0.75)
    translate_y: Range = (0.25, 0.75)
    scale: Range = (0.2, 0.4)
    eval_placements: int = Field(default=100, ge=1)
    # label carried by creation reports; placements use the ranges above
    environment: Environment = "indoor-analog"

    @model_validator(mode="after")
    def validate_ranges(self) -> "CreationConfig":
        for name in ("rotation_deg", "translate_x", "translate_y", "scale"):
            _check_range(name, getattr(self, name))
        if self.scale[0] <= 0.0 or self.scale[1] > 1.0:
            raise ValueError(f"scale range must lie within (0, 1], got {list(self.scale)}")
        return self


class SweepConfig(_Strict):
    n_frames: int = Field(default=60, ge=1)
    s_far: float = Field(default=0.08, gt=0.0, le=1.0)
    s_near: float = Field(default=0.6, gt=0.0, le=1.0)
    environment: Environment = "indoor-analog"
    # None means "use the environment preset"
    rotation_jitter: float | None = Field(default=None, ge=0.0)
    gain: Range | None = None
    lateral_drift: float | None = None
    translate_jitter: float = Field(default=0.02, ge=0.0)


class EvalConfig(_Strict):
    mode: Literal["disappearance", "creation"] = "disappearance"
    score_threshold: float | None = Field(default=None, gt=0.0, lt=1.0)
    formats: tuple[Literal["csv", "json"], ...] = ("csv", "json")
    clean_baseline: bool = True


class PathsConfig(_Strict):
    dataset: str = "dataset.npz"
    model: str = "model.mdet"
    model_b: str = "model_b.mdet"
    perturbation: str = "perturbation.pert"
    patch: str = "patch.pert"


class RunConfig(_Strict):
    seed: int = Field(default=7, ge=0, le=2**64 - 1)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    detector_b: DetectorConfig = Field(default_factory=lambda: DetectorConfig(channels=(16, 32, 32, 64)))
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    scene: SceneDistribution = Field(default_factory=SceneDistribution)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    creation: CreationConfig = Field(default_factory=CreationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def validate_classes(self) -> "RunConfig":
        if self.attack.target_class >= self.detector.num_classes:
            raise ValueError(
                f"target_class {self.attack.target_class} is outside the detector's "
                f"{self.detector.num_classes} classes"
            )
        return self


# Reports


class DetectionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_id: int
    score: float
    box: tuple[float, float, float, float]
    cell: tuple[int, int]
    box_index: int


class FrameRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame: int
    detections: tuple[DetectionRecord, ...]
    target_detected: bool


class EvalReport(BaseModel):
    """Per-frame detections plus the success ratio.

    For disappearance runs a frame succeeds when the target is absent; for
    creation runs it succeeds when the target is (spuriously) present.
    """
    model_config = ConfigDict(frozen=True, extra="ignore")

    mode: Literal["disappearance", "creation"]
    environment: Environment
    detector_tag: str
    attack_tag: str = "clean"
    target_class: int
    total_frames: int = Field(ge=1)
    success_frames: int = Field(ge=0)
    frames: tuple[FrameRecord, ...] = ()

    @model_validator(mode="after")
    def validate_counts(self) -> "EvalReport":
        if self.success_frames > self.total_frames:
            raise ValueError(
                f"success_frames {self.success_frames} exceeds total_frames {self.total_frames}"
            )
        return self

    @computed_field
    @property
    def success_ratio(self) -> float:
        return self.success_frames / self.total_frames

    @field_serializer("success_ratio")
    def serialize_ratio(self, value: float) -> float:
        return round(value, 4)

    @computed_field
    @property
    def frames_without_target(self) -> int:
        if self.mode == "disappearance":
            return self.success_frames
        return self.total_frames - self.success_frames

    def summary_line(self) -> str:
        return f"{self.success_frames}/{self.total_frames} ({100.0 * self.success_ratio:.1f}%)"


class TransferReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    source_tag: str
    target_tag: str
    source: EvalReport
    target: EvalReport

    @model_validator(mode="after")
    def validate_pairing(self) -> "TransferReport":
        if self.source.total_frames != self.target.total_frames:
            raise ValueError("Transfer reports must cover the same frame sequence")
        return self


class Manifest(BaseModel):
    command: str
    config_hash: str
    seed: int
    artifacts: list[str]
    version: dict[str, str]
