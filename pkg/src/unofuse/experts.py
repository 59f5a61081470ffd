"""Modality-specific segmentation experts with stochastic-dropout sampling.

An expert is a small fixed-architecture conv net over one modality (or, for
the early-fusion "leak" expert, the channel concatenation of both). Each
expert predicts independently of every other expert; an uncertainty
estimate comes from repeating the forward pass with dropout forced on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import NumericalError, ValidationError
from .fields import Image, LabelMap, LogitMap, ProbMap, argmax_labels, softmax
from .nnet import Adam, Conv, Dropout, Network, ReLU, cross_entropy, load_network, save_network
from .seeding import derive_seed

MODALITY_CHANNELS = {"a": 3, "b": 1, "ab": 4}

HIDDEN_CHANNELS = 16

# Fixed input standardization: nominal [0, 1] fields are mapped to roughly
# [-2, 2], so saturated inputs (all-black, salt hits) drive the conv features
# hard instead of silencing them.
INPUT_CENTER = 0.5
INPUT_SCALE = 0.25


def build_expert_network(in_channels: int, num_classes: int, dropout_rate: float,
                         rng=None) -> Network:
    """Fixed expert topology: two hidden 3x3 conv blocks, then a 1x1 head."""
    if num_classes < 2:
        raise ValidationError("experts need at least 2 classes")
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    layers = [
        Conv(in_channels, HIDDEN_CHANNELS, 3, gen),
        ReLU(),
        Dropout(dropout_rate),
        Conv(HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3, gen),
        ReLU(),
        Dropout(dropout_rate),
        Conv(HIDDEN_CHANNELS, num_classes, 1, gen),
    ]
    return Network(layers, in_channels)


@dataclass(frozen=True)
class McdoSampleSet:
    """Probability maps from repeated stochastic forward passes of one expert."""

    expert_id: str
    passes: int
    samples: tuple[ProbMap, ...] = field(default=())

    def __post_init__(self):
        if self.passes < 2 or len(self.samples) != self.passes:
            raise ValidationError("sample sets need at least 2 matching samples")
        shape = self.samples[0].data.shape
        for s in self.samples[1:]:
            if s.data.shape != shape:
                raise ValidationError("all samples must share one shape")


def _input_array(image, channels: int) -> np.ndarray:
    """Validate an input field; returns the raw [0, 1]-scaled array."""
    arr = image.data if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ValidationError(
            f"expected a (H, W, {channels}) input, got shape {tuple(arr.shape)}"
        )
    return arr


def standardize_input(arr: np.ndarray) -> np.ndarray:
    """Map a nominal [0, 1] field to network scale. Applied once per forward."""
    return (arr - INPUT_CENTER) / INPUT_SCALE


def _label_array(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)


class SegmentationExpert(BaseEstimator):
    """Per-pixel classifier over one modality, trained with Adam on cross-entropy.

    The checkpoint with the best validation loss (including the initial
    state) is what fit() keeps. Trained experts are immutable in use:
    predict() runs a single deterministic pass with dropout inactive.
    """

    def __init__(self, modality: str = "a", num_classes: int = 6,
                 dropout_rate: float = 0.25, steps: int = 1500,
                 learning_rate: float = 1e-3, eval_every: int = 100,
                 seed: int = 0, expert_id: str | None = None):
        self.modality = modality
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        self.steps = steps
        self.learning_rate = learning_rate
        self.eval_every = eval_every
        self.seed = seed
        self.expert_id = expert_id

    @property
    def input_channels(self) -> int:
        if self.modality not in MODALITY_CHANNELS:
            raise ValidationError(f"unknown modality {self.modality!r}")
        return MODALITY_CHANNELS[self.modality]

    @property
    def id(self) -> str:
        return self.expert_id or f"expert_{self.modality}"

    def _validation_loss(self, network: Network, inputs, labels) -> float:
        total = 0.0
        for x, y in zip(inputs, labels):
            logits, _ = network.forward(x, train=False)
            total += cross_entropy(logits, y)[0]
        return total / len(inputs)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on (image, label-map) pairs; validation defaults to the train set."""
        inputs = [standardize_input(_input_array(x, self.input_channels)) for x in X]
        labels = [_label_array(t) for t in y]
        if not inputs or len(inputs) != len(labels):
            raise ValidationError("need matching, non-empty image and label lists")
        if X_val is None:
            val_inputs, val_labels = inputs, labels
        else:
            val_inputs = [standardize_input(_input_array(x, self.input_channels)) for x in X_val]
            val_labels = [_label_array(t) for t in y_val]

        rng = np.random.default_rng(derive_seed(self.seed, 0))
        network = build_expert_network(
            self.input_channels, self.num_classes, self.dropout_rate, rng
        )
        optimizer = Adam(lr=self.learning_rate)
        params = [arr for _, _, arr in network.parameters()]

        best_val = self._validation_loss(network, val_inputs, val_labels)
        best_state = network.state_arrays()
        history = [(0, float("nan"), best_val)]
        for step in range(1, self.steps + 1):
            idx = int(rng.integers(0, len(inputs)))
            logits, caches = network.forward(
                inputs[idx], train=True, rng=derive_seed(self.seed, 1, step)
            )
            loss, grad_out = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged at step {step}: loss={loss}")
            _, grads = network.backward(caches, grad_out)
            optimizer.step(params, grads)
            if step % self.eval_every == 0 or step == self.steps:
                val_loss = self._validation_loss(network, val_inputs, val_labels)
                history.append((step, loss, val_loss))
                if val_loss < best_val:
                    best_val = val_loss
                    best_state = network.state_arrays()
        network.load_state_arrays(best_state)

        self.network_ = network
        self.history_ = history
        self.best_val_loss_ = best_val
        return self

    def _require_fitted(self) -> Network:
        if not hasattr(self, "network_"):
            raise NotFittedError("this expert has not been fitted yet")
        return self.network_

    def predict_logits(self, image) -> LogitMap:
        network = self._require_fitted()
        arr = standardize_input(_input_array(image, self.input_channels))
        out, _ = network.forward(arr, train=False)
        return LogitMap(out)

    def predict_proba(self, image) -> ProbMap:
        return ProbMap.from_logits(self.predict_logits(image))

    def predict(self, image) -> LabelMap:
        return argmax_labels(self.predict_proba(image))

    def mcdo_samples(self, image, passes: int = 10, seed: int = 0) -> McdoSampleSet:
        """Repeat the forward pass with dropout forced active in eval mode.

        Pass t draws its mask from a seed derived from (seed, t), so the
        whole sample set is reproducible and passes could run in parallel.
        """
        network = self._require_fitted()
        if passes < 2:
            raise ValidationError("need at least 2 stochastic passes")
        arr = standardize_input(_input_array(image, self.input_channels))
        samples = []
        for t in range(passes):
            out, _ = network.forward(
                arr, train=False, rng=derive_seed(seed, t), force_dropout=True
            )
            samples.append(ProbMap(softmax(out)))
        return McdoSampleSet(expert_id=self.id, passes=passes, samples=tuple(samples))

    def save(self, path) -> None:
        network = self._require_fitted()
        save_network(
            path,
            network,
            meta={
                "kind": "segmentation-expert",
                "modality": self.modality,
                "num_classes": self.num_classes,
                "dropout_rate": self.dropout_rate,
                "steps": self.steps,
                "learning_rate": self.learning_rate,
                "eval_every": self.eval_every,
                "seed": self.seed,
                "expert_id": self.expert_id,
                "best_val_loss": getattr(self, "best_val_loss_", None),
            },
        )

    @classmethod
    def load(cls, path) -> "SegmentationExpert":
        network, meta = load_network(path)
        if meta.get("kind") != "segmentation-expert":
            raise ValidationError(f"{path}: not an expert checkpoint")
        expert = cls(
            modality=meta["modality"],
            num_classes=meta["num_classes"],
            dropout_rate=meta["dropout_rate"],
            steps=meta["steps"],
            learning_rate=meta["learning_rate"],
            eval_every=meta["eval_every"],
            seed=meta["seed"],
            expert_id=meta["expert_id"],
        )
        expert.network_ = network
        expert.best_val_loss_ = meta.get("best_val_loss")
        expert.history_ = []
        return expert
