"""Per-pixel field types (images, logits, probabilities, scalar maps) and shared kernels.

Fields carry float64 in memory; the binary file format (see `unofuse.io`)
stores float32 payloads. All values must be finite. Instances are immutable
after construction, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .validation import as_field_array, check_finite

PROB_SUM_TOL = 1e-6
TEMP_MIN = 1e-3
TEMP_MAX = 1e3


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Image:
    """Dense (H, W, C) real field, values nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_field_array(self.data, "image data", ndim=3)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValidationError(f"labels must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError("labels must be integers")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        frozen = arr.astype(np.uint8, copy=True)
        frozen.setflags(write=False)
        object.__setattr__(self, "labels", frozen)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel pre-softmax scores, shape (H, W, num_classes)."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_field_array(self.data, "logit data", ndim=3)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel probability vectors: entries in [0, 1], each pixel sums to 1."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_field_array(self.data, "probability data", ndim=3)
        if arr.size:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValidationError("probabilities must lie in [0, 1]")
            sums = arr.sum(axis=-1)
            if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
                raise ValidationError(
                    f"per-pixel probabilities must sum to 1 within {PROB_SUM_TOL}"
                )
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_logits(cls, logits: LogitMap) -> "ProbMap":
        return cls(softmax(logits.data))


@dataclass(frozen=True)
class UncertaintyMap:
    """Per-pixel non-negative scalar field, shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_field_array(self.data, "uncertainty data", ndim=2)
        if arr.size and arr.min() < 0.0:
            raise ValidationError("uncertainty values must be >= 0")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TemperatureMap:
    """Per-pixel positive temperature multipliers, clamped to [1e-3, 1e3]."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_field_array(self.data, "temperature data", ndim=2)
        if arr.size and (arr.min() < TEMP_MIN or arr.max() > TEMP_MAX):
            raise ValidationError(f"temperatures must lie in [{TEMP_MIN}, {TEMP_MAX}]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max-subtraction for stability.

    Shared kernel for every place that turns (scaled) logits into
    probabilities. Raises ValidationError on non-finite input.
    """
    arr = np.asarray(logits, dtype=np.float64)
    check_finite(arr, "logits")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def argmax_labels(probs: ProbMap) -> LabelMap:
    """Per-pixel index of the maximum probability; ties go to the lowest class."""
    labels = np.argmax(probs.data, axis=-1)
    return LabelMap(labels=labels, num_classes=probs.num_classes)
