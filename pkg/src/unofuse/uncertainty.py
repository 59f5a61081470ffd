"""Per-pixel uncertainty metrics from deterministic outputs and stochastic sample sets.

All entropies are in nats. The total-uncertainty estimate is the entropy of
the mean over stochastic passes; the epistemic part is that total minus the
mean per-pass entropy, clamped at zero against floating-point dust. Pure
functions throughout, freely parallel across pixels and images.
"""

from __future__ import annotations

import enum

import numpy as np

from .exceptions import ValidationError
from .fields import ProbMap, UncertaintyMap

_LOG_FLOOR = 1e-12


class Metric(str, enum.Enum):
    """Image-level uncertainty statistics usable for deviation ratios."""

    ENTROPY = "entropy"
    PREDICTIVE_ENTROPY = "predictive_entropy"
    MUTUAL_INFORMATION = "mutual_information"
    TEMPERATURE = "temperature"

    def __str__(self) -> str:  # keep CLI/JSON output flat
        return self.value


#: Metrics computable from a single deterministic pass (plus a temperature map).
SINGLE_PASS_METRICS = (Metric.TEMPERATURE, Metric.ENTROPY)
#: Metrics requiring multiple stochastic forward passes.
SAMPLED_METRICS = (Metric.PREDICTIVE_ENTROPY, Metric.MUTUAL_INFORMATION)


def _entropy_terms(probs: np.ndarray) -> np.ndarray:
    # 0 * log 0 := 0; the floor only matters at p == 0 where the factor kills it.
    return -probs * np.log(np.maximum(probs, _LOG_FLOOR))


def entropy(probs: ProbMap) -> UncertaintyMap:
    """Per-pixel Shannon entropy of a single predictive distribution."""
    return UncertaintyMap(_entropy_terms(probs.data).sum(axis=-1))


def _stack_samples(samples) -> np.ndarray:
    if hasattr(samples, "samples"):  # accept a whole sample set
        samples = samples.samples
    maps = list(samples)
    if len(maps) < 2:
        raise ValidationError("need at least 2 stochastic samples")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ValidationError("stochastic samples must share one shape")
    return np.stack([m.data for m in maps], axis=0)


def predictive_entropy(samples) -> UncertaintyMap:
    """Per-pixel entropy of the mean distribution over stochastic passes."""
    stacked = _stack_samples(samples)
    mean = stacked.mean(axis=0)
    return UncertaintyMap(_entropy_terms(mean).sum(axis=-1))


def mutual_information(samples) -> UncertaintyMap:
    """Per-pixel epistemic uncertainty: entropy of the mean minus mean entropy."""
    stacked = _stack_samples(samples)
    mean = stacked.mean(axis=0)
    total = _entropy_terms(mean).sum(axis=-1)
    expected = _entropy_terms(stacked).sum(axis=-1).mean(axis=0)
    return UncertaintyMap(np.maximum(total - expected, 0.0))


def image_score(umap: UncertaintyMap) -> float:
    """Aggregate a per-pixel map to one scalar: the arithmetic mean over pixels."""
    return float(umap.data.mean())
