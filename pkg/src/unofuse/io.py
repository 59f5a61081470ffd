"""Binary file formats: tensor fields, label grids, and PGM/PPM images.

Field files are little-endian float32 payloads preceded by an 8-byte magic
``UNOF0001`` and three u32 dims (H, W, C). Label files use the magic
``UNOL0001`` with a u8 payload and C fixed to 1.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .fields import LabelMap

FIELD_MAGIC = b"UNOF0001"
LABEL_MAGIC = b"UNOL0001"
_HEADER = struct.Struct("<III")

# Fixed palette for rendering label maps (background + up to 7 classes).
LABEL_COLORS = np.array(
    [
        (40, 44, 52),      # background: dark slate
        (224, 62, 62),     # red
        (66, 99, 235),     # blue
        (61, 184, 92),     # green
        (244, 164, 41),    # orange
        (231, 222, 74),    # yellow
        (171, 99, 220),    # purple
        (94, 203, 207),    # cyan
    ],
    dtype=np.uint8,
)


def pack_field(data: np.ndarray) -> bytes:
    """Serialize a (H, W, C) or (H, W) float array as a float32 field record."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError(f"field must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    return FIELD_MAGIC + _HEADER.pack(h, w, c) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_field(buffer: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one field record from a byte buffer; returns (array, next offset)."""
    if buffer[offset:offset + 8] != FIELD_MAGIC:
        raise ValidationError("bad magic for a field record")
    h, w, c = _HEADER.unpack_from(buffer, offset + 8)
    start = offset + 8 + _HEADER.size
    payload = np.frombuffer(buffer, dtype="<f4", count=h * w * c, offset=start)
    if payload.size != h * w * c:
        raise ValidationError("truncated field payload")
    return payload.reshape(h, w, c).astype(np.float64), start + 4 * h * w * c


def write_field(path, data: np.ndarray) -> None:
    """Write a (H, W, C) or (H, W) float array as a float32 field file."""
    with open(path, "wb") as fh:
        fh.write(pack_field(data))


def read_field(path) -> np.ndarray:
    """Read a field file back as a float64 (H, W, C) array."""
    raw = Path(path).read_bytes()
    try:
        arr, _ = unpack_field(raw)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return arr


def write_labels(path, labels: LabelMap) -> None:
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(_HEADER.pack(labels.height, labels.width, 1))
        fh.write(labels.labels.astype(np.uint8).tobytes())


def read_labels(path, num_classes: int) -> LabelMap:
    raw = Path(path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise ValidationError(f"{path}: bad magic for a label file")
    h, w, c = _HEADER.unpack_from(raw, 8)
    if c != 1:
        raise ValidationError(f"{path}: label files must have C=1, got {c}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=8 + _HEADER.size)
    if payload.size != h * w:
        raise ValidationError(f"{path}: truncated label payload")
    return LabelMap(labels=payload.reshape(h, w).copy(), num_classes=num_classes)


def write_pgm(path, values: np.ndarray, max_value: float | None = None) -> None:
    """Write a (H, W) array as binary 8-bit PGM, scaled by max_value (default: array max)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"PGM export needs a 2-D array, got shape {arr.shape}")
    scale = float(max_value) if max_value is not None else float(arr.max()) or 1.0
    if scale <= 0:
        scale = 1.0
    gray = np.clip(arr / scale, 0.0, 1.0)
    byte = np.round(gray * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(byte.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"PPM export needs a (H, W, 3) array, got shape {arr.shape}")
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def write_label_ppm(path, labels: LabelMap) -> None:
    """Render a label map with the fixed class palette."""
    if labels.num_classes > len(LABEL_COLORS):
        raise ValidationError("palette supports at most 8 classes")
    write_ppm(path, LABEL_COLORS[labels.labels])
