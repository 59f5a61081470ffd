"""Deviation-ratio calibration and the scalar temperature-scaling baseline.

Per-image uncertainty scores are summarized over the training set as a mean
and population standard deviation. A test image whose score exceeds the
training mean by more than one standard deviation earns a deviation ratio
below one; scaling logits by that ratio flattens the prediction toward
uniform without ever changing the per-pixel argmax.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import ValidationError
from .fields import LabelMap, LogitMap, ProbMap, softmax

logger = logging.getLogger(__name__)

MEAN_FLOOR = 1e-9


@dataclass(frozen=True)
class DeviationStats:
    """Training-set summary of one (expert, metric) score stream."""

    expert_id: str
    metric: str
    mu_train: float
    sigma_train: float
    num_images: int

    def __post_init__(self):
        if self.sigma_train < 0:
            raise ValidationError("sigma_train must be >= 0")
        if self.num_images < 2:
            raise ValidationError("stats need at least 2 images")


def fit_stats(per_image_scores, expert_id: str = "", metric: str = "") -> DeviationStats:
    """Mean and population standard deviation of per-image scores."""
    scores = np.asarray(list(per_image_scores), dtype=np.float64)
    if scores.size < 2:
        raise ValidationError("need at least 2 per-image scores")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores contain non-finite values")
    return DeviationStats(
        expert_id=expert_id,
        metric=metric,
        mu_train=float(scores.mean()),
        sigma_train=float(scores.std()),
        num_images=int(scores.size),
    )


def deviation_ratio(mu_test: float, stats: DeviationStats) -> float:
    """Ratio in (0, 1]: 1 while the test score stays within one sigma of training."""
    mu_test = float(mu_test)
    mu = stats.mu_train
    if mu <= MEAN_FLOOR:
        # Degenerate: a metric that never fired during training.
        logger.warning(
            "degenerate deviation stats for (%s, %s): mu_train=%.3g",
            stats.expert_id, stats.metric, mu,
        )
        if mu_test <= stats.sigma_train:
            return 1.0
        mu = MEAN_FLOOR
    excess = max(0.0, mu_test - mu - stats.sigma_train)
    return mu / (excess + mu)


def combine_min(ratios) -> float:
    """Worst-case combination across metrics: the minimum ratio."""
    values = list(ratios)
    if not values:
        raise ValidationError("cannot combine an empty list of ratios")
    return float(min(values))


def multimodal_min(per_expert_ratios) -> float:
    """Second min, across the combined ratios of the involved experts."""
    return combine_min(per_expert_ratios)


def scale_logits(logits: LogitMap, ratio: float) -> ProbMap:
    """Softmax of ratio-scaled logits; ratios below 1 soften the distribution."""
    ratio = float(ratio)
    if not np.isfinite(ratio) or ratio < 0:
        raise ValidationError(f"scaling ratio must be finite and >= 0, got {ratio}")
    return ProbMap(softmax(logits.data * ratio))


def _nll_at_temperature(logit_arrays, label_arrays, temperature: float) -> float:
    total = 0.0
    count = 0
    for logits, labels in zip(logit_arrays, label_arrays):
        probs = softmax(logits / temperature).reshape(-1, logits.shape[-1])
        picked = probs[np.arange(probs.shape[0]), labels.reshape(-1)]
        total += float(-np.log(np.maximum(picked, 1e-12)).sum())
        count += probs.shape[0]
    return total / count


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def fit_scalar_temperature(logit_maps, label_maps,
                           lo: float = 0.05, hi: float = 20.0,
                           iterations: int = 90) -> float:
    """Scalar temperature minimizing validation NLL of softmax(l / T).

    Golden-section search over [lo, hi]; the NLL is unimodal in T for any
    non-degenerate validation set.
    """
    logit_arrays = [m.data if isinstance(m, LogitMap) else np.asarray(m) for m in logit_maps]
    label_arrays = [m.labels if isinstance(m, LabelMap) else np.asarray(m) for m in label_maps]
    if not logit_arrays or len(logit_arrays) != len(label_arrays):
        raise ValidationError("need matching, non-empty logit and label lists")

    a, b = float(lo), float(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = _nll_at_temperature(logit_arrays, label_arrays, c)
    fd = _nll_at_temperature(logit_arrays, label_arrays, d)
    for _ in range(iterations):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = _nll_at_temperature(logit_arrays, label_arrays, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = _nll_at_temperature(logit_arrays, label_arrays, d)
    best = (a + b) / 2.0
    # Never return a temperature worse than the uncalibrated baseline.
    if _nll_at_temperature(logit_arrays, label_arrays, best) > _nll_at_temperature(
        logit_arrays, label_arrays, 1.0
    ):
        return 1.0
    return float(best)


class DeviationCalibrator(BaseEstimator):
    """Estimator wrapper around the per-(expert, metric) deviation statistics.

    fit() consumes the training per-image scores; transform() maps test
    scores to deviation ratios in (0, 1].
    """

    def __init__(self, expert_id: str = "", metric: str = ""):
        self.expert_id = expert_id
        self.metric = metric

    def fit(self, scores, y=None):
        self.stats_ = fit_stats(scores, expert_id=self.expert_id, metric=str(self.metric))
        return self

    def transform(self, scores) -> np.ndarray:
        if not hasattr(self, "stats_"):
            raise NotFittedError("DeviationCalibrator must be fitted before transform")
        return np.array([deviation_ratio(s, self.stats_) for s in np.atleast_1d(scores)])


class ScalarTemperature(BaseEstimator):
    """Classic single-temperature calibration of logits, fitted on a validation set."""

    def __init__(self, lo: float = 0.05, hi: float = 20.0):
        self.lo = lo
        self.hi = hi

    def fit(self, logit_maps, label_maps):
        self.temperature_ = fit_scalar_temperature(logit_maps, label_maps, self.lo, self.hi)
        return self

    def transform(self, logits: LogitMap) -> ProbMap:
        if not hasattr(self, "temperature_"):
            raise NotFittedError("ScalarTemperature must be fitted before transform")
        return ProbMap(softmax(logits.data / self.temperature_))


def save_stats(path, stats_list) -> None:
    """Persist deviation stats as a JSON array of flat records."""
    records = [
        {
            "expert": s.expert_id,
            "metric": s.metric,
            "mu_train": s.mu_train,
            "sigma_train": s.sigma_train,
            "n": s.num_images,
        }
        for s in stats_list
    ]
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stats(path) -> list[DeviationStats]:
    with open(path) as fh:
        records = json.load(fh)
    return [
        DeviationStats(
            expert_id=r["expert"],
            metric=r["metric"],
            mu_train=r["mu_train"],
            sigma_train=r["sigma_train"],
            num_images=r["n"],
        )
        for r in records
    ]
