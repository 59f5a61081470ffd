"""Probabilistic combination of expert predictions.

Noisy-or treats each expert as an independent cause that can activate a
class on its own: per class, I_c = 1 - prod_i (1 - p_i_c), renormalized
across classes. Unlike the multiplicative baseline, which smooths the
contributing distributions, noisy-or preserves one expert's strong vote
even when the others are indifferent. The uncertainty-aware variants scale
each expert's logits by its deviation ratio first, and may add a leak
expert (a multimodal model covering causes the per-modality experts miss).
"""

from __future__ import annotations

import enum

import numpy as np

from .exceptions import ValidationError
from .fields import LogitMap, ProbMap, softmax
from . import calibration

_PROB_CLAMP = 1e-9
_SUM_FLOOR = 1e-12


class FusionMethod(str, enum.Enum):
    SOFT_MULT = "softmult"
    SOFT_MULT_T = "softmult-t"
    NOISY_OR = "noisyor"
    NOISY_OR_T = "noisyor-t"
    UNO = "uno"
    UNO_PP = "unopp"

    def __str__(self) -> str:
        return self.value


BASELINE_METHODS = (
    FusionMethod.SOFT_MULT,
    FusionMethod.SOFT_MULT_T,
    FusionMethod.NOISY_OR,
    FusionMethod.NOISY_OR_T,
)


def _stack_prob_maps(prob_maps) -> np.ndarray:
    maps = list(prob_maps)
    if not maps:
        raise ValidationError("fusion needs at least one expert")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ValidationError("fusion inputs must share one shape")
    return np.stack([m.data for m in maps], axis=0)


def _normalize(scores: np.ndarray) -> ProbMap:
    totals = scores.sum(axis=-1, keepdims=True)
    # All-zero class scores cannot arise from valid probability maps, but a
    # total function is cheaper than an apology.
    degenerate = totals < _SUM_FLOOR
    num_classes = scores.shape[-1]
    out = np.where(degenerate, 1.0 / num_classes, scores / np.where(degenerate, 1.0, totals))
    return ProbMap(out)


def noisy_or(prob_maps) -> ProbMap:
    """Per-class noisy-or activation across experts, renormalized per pixel."""
    stacked = np.clip(_stack_prob_maps(prob_maps), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    activation = 1.0 - np.prod(1.0 - stacked, axis=0)
    return _normalize(activation)


def soft_mult(prob_maps) -> ProbMap:
    """Element-wise product of expert probabilities, renormalized per pixel."""
    stacked = _stack_prob_maps(prob_maps)
    return _normalize(np.prod(stacked, axis=0))


def fuse_uno(logit_maps, ratios, method: FusionMethod = FusionMethod.UNO,
             leak_logits: LogitMap | None = None,
             leak_ratio: float | None = None) -> ProbMap:
    """Uncertainty-aware noisy-or over ratio-scaled expert logits.

    Each expert's logits are scaled by its own combined deviation ratio; for
    the leak variant the leak expert is scaled by the cross-expert ratio
    (normally ``multimodal_min`` of the per-expert ratios).
    """
    method = FusionMethod(method)
    if method not in (FusionMethod.UNO, FusionMethod.UNO_PP):
        raise ValidationError(f"fuse_uno handles uno/unopp, got {method}")
    logit_maps = list(logit_maps)
    ratios = list(ratios)
    if len(logit_maps) != len(ratios):
        raise ValidationError("need one deviation ratio per expert")
    entries = [calibration.scale_logits(lm, r) for lm, r in zip(logit_maps, ratios)]
    if method is FusionMethod.UNO_PP:
        if leak_logits is None:
            raise ValidationError("unopp requires a leak expert")
        if leak_ratio is None:
            leak_ratio = calibration.multimodal_min(ratios)
        entries.append(calibration.scale_logits(leak_logits, leak_ratio))
    return noisy_or(entries)


def fuse_baseline(logit_maps, method: FusionMethod,
                  temperatures=None) -> ProbMap:
    """Plain or temperature-scaled fusion baselines (no uncertainty scaling)."""
    method = FusionMethod(method)
    if method not in BASELINE_METHODS:
        raise ValidationError(f"fuse_baseline handles baseline methods, got {method}")
    logit_maps = list(logit_maps)
    scaled = method in (FusionMethod.SOFT_MULT_T, FusionMethod.NOISY_OR_T)
    if scaled:
        if temperatures is None or len(list(temperatures)) != len(logit_maps):
            raise ValidationError("temperature-scaled baselines need one T per expert")
        temps = [float(t) for t in temperatures]
        probs = [ProbMap(softmax(lm.data / t)) for lm, t in zip(logit_maps, temps)]
    else:
        probs = [ProbMap.from_logits(lm) for lm in logit_maps]
    if method in (FusionMethod.NOISY_OR, FusionMethod.NOISY_OR_T):
        return noisy_or(probs)
    return soft_mult(probs)
