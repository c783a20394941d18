# src/signforge/model_store.py
"""MDET binary model files.

Layout (all little-endian):
    b"MDET", version u32,
    grid_size, boxes_per_cell, num_classes, input_size u32,
    class_prob_mode u32 (0 product, 1 conditional),
    n_stages u32, channels u32 * n_stages,
    score_threshold f64, nms_iou_threshold f64, anchors f64 * 2B,
    weight tensors f64 in declaration order.
"""
import math
import struct
from pathlib import Path

import numpy as np

from signforge.minidet import DetectorModel, weight_shapes
from signforge.schemas import DetectorConfig

MAGIC = b"MDET"
VERSION = 1
_MODES = ("product", "conditional")


class ModelFormatError(ValueError):
    pass


def encode_model(model: DetectorModel) -> bytes:
    cfg = model.config
    parts = [
        MAGIC,
        struct.pack(
            "<6I",
            VERSION,
            cfg.grid_size,
            cfg.boxes_per_cell,
            cfg.num_classes,
            cfg.input_size,
            _MODES.index(cfg.class_prob_mode),
        ),
        struct.pack(f"<I{len(cfg.channels)}I", len(cfg.channels), *cfg.channels),
        struct.pack("<2d", cfg.score_threshold, cfg.nms_iou_threshold),
        struct.pack(f"<{2 * cfg.boxes_per_cell}d", *(v for pair in cfg.anchors for v in pair)),
    ]
    parts.extend(w.astype("<f8").tobytes() for w in model.weights)
    return b"".join(parts)


def decode_model(data: bytes) -> DetectorModel:
    if data[:4] != MAGIC:
        raise ModelFormatError(f"Bad magic {data[:4]!r}, expected {MAGIC!r}")
    offset = 4
    try:
        version, grid, boxes, classes, input_size, mode = struct.unpack_from("<6I", data, offset)
        offset += 24
        if version != VERSION:
            raise ModelFormatError(f"Unsupported model version {version}")
        if mode >= len(_MODES):
            raise ModelFormatError(f"Unknown class_prob_mode code {mode}")
        (n_stages,) = struct.unpack_from("<I", data, offset)
        offset += 4
        channels = struct.unpack_from(f"<{n_stages}I", data, offset)
        offset += 4 * n_stages
        score_threshold, nms_iou = struct.unpack_from("<2d", data, offset)
        offset += 16
        anchor_values = struct.unpack_from(f"<{2 * boxes}d", data, offset)
        offset += 16 * boxes
    except struct.error as e:
        raise ModelFormatError(f"Truncated model header at byte {offset}: {e}") from None

    try:
        config = DetectorConfig(
            grid_size=grid,
            boxes_per_cell=boxes,
            num_classes=classes,
            input_size=input_size,
            anchors=tuple(zip(anchor_values[0::2], anchor_values[1::2])),
            score_threshold=score_threshold,
            nms_iou_threshold=nms_iou,
            channels=channels,
            class_prob_mode=_MODES[mode],
        )
    except ValueError as e:
        raise ModelFormatError(f"Invalid detector config in model header: {e}") from None

    weights = []
    for shape in weight_shapes(config):
        size = math.prod(shape) * 8
        if offset + size > len(data):
            raise ModelFormatError(f"Truncated weights at byte {offset}: need {size} more bytes")
        weights.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).reshape(shape))
        offset += size
    if offset != len(data):
        raise ModelFormatError(f"{len(data) - offset} trailing bytes after weights")
    return DetectorModel(config, [w.astype(np.float64) for w in weights])


def save_model(model: DetectorModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_model(model))
    return path


def load_model(path: str | Path) -> DetectorModel:
    return decode_model(Path(path).read_bytes())
