# src/signforge/ppm.py
"""Binary PPM (P6, maxval 255) image IO."""
from pathlib import Path

import numpy as np


class PPMFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_token(data: bytes, offset: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    while offset < len(data):
        ch = data[offset:offset + 1]
        if ch == b"#":
            end = data.find(b"\n", offset)
            offset = len(data) if end < 0 else end + 1
        elif ch.isspace():
            offset += 1
        else:
            break
    start = offset
    while offset < len(data) and not data[offset:offset + 1].isspace() and data[offset:offset + 1] != b"#":
        offset += 1
    if start == offset:
        raise PPMFormatError("Unexpected end of header", start)
    return data[start:offset], offset


def decode_ppm(data: bytes) -> np.ndarray:
    magic, offset = _read_token(data, 0)
    if magic != b"P6":
        raise PPMFormatError(f"Expected magic P6, got {magic!r}", 0)
    fields = []
    for name in ("width", "height", "maxval"):
        token, offset = _read_token(data, offset)
        start = offset - len(token)
        if not token.isdigit() or int(token) <= 0:
            raise PPMFormatError(f"Invalid {name} {token!r}", start)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise PPMFormatError(f"Unsupported maxval {maxval}, only 255 is accepted", offset)
    if offset >= len(data) or not data[offset:offset + 1].isspace():
        raise PPMFormatError("Missing whitespace after maxval", offset)
    offset += 1
    expected = width * height * 3
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise PPMFormatError(
            f"Truncated payload: expected {expected} bytes, found {len(payload)}", offset + len(payload)
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"PPM images must be H x W x 3 (or single channel), got shape {image.shape}")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    height, width, _ = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(image))
    return path
