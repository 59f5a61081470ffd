"""Data-conditioned spatial temperature network.

A shallow encoder-decoder maps an input image to a per-pixel positive
multiplier on a frozen expert's logits: temperatures below 1 soften the
prediction where the input looks unreliable. Trained by minimizing the
negative log-likelihood of the true labels under the temperature-scaled
softmax, with the expert untouched. The map doubles as an uncertainty
signal: the image-level score is the mean reciprocal temperature, so
degraded inputs (low temperature) score high.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import NumericalError, ValidationError
from .fields import (
    TEMP_MAX,
    TEMP_MIN,
    LabelMap,
    LogitMap,
    ProbMap,
    TemperatureMap,
    softmax,
)
from .nnet import (
    Adam,
    Conv,
    GradCheckReport,
    MaxPool2,
    Network,
    ReLU,
    Upsample2,
    kink_margin,
    load_network,
    save_network,
)
from .experts import (
    MODALITY_CHANNELS,
    SegmentationExpert,
    _input_array,
    _label_array,
    standardize_input,
)
from .seeding import derive_seed

_HEAD_INIT_SCALE = 0.1


def build_tempnet_network(in_channels: int, rng=None,
                          widths: tuple[int, int] = (8, 16)) -> Network:
    """Encoder (2x conv+pool), decoder (2x upsample+conv), 1-channel head.

    The head starts with small weights and zero bias so the initial
    temperature sits near 1 everywhere (exp(0) = 1): an untrained map is an
    identity calibration.
    """
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    narrow, wide = widths
    layers = [
        Conv(in_channels, narrow, 3, gen),
        ReLU(),
        MaxPool2(),
        Conv(narrow, wide, 3, gen),
        ReLU(),
        MaxPool2(),
        Upsample2(),
        Conv(wide, narrow, 3, gen),
        ReLU(),
        Upsample2(),
        Conv(narrow, narrow, 3, gen),
        ReLU(),
        Conv(narrow, 1, 1, gen),
    ]
    head = layers[-1]
    head.weight *= _HEAD_INIT_SCALE
    return Network(layers, in_channels)


def temperature_activation(raw: np.ndarray) -> np.ndarray:
    """Map raw head output to a positive, clamped temperature field."""
    return np.clip(np.exp(raw), TEMP_MIN, TEMP_MAX)


def scale_logits_by_map(logits: LogitMap, temps: TemperatureMap) -> ProbMap:
    """Per-pixel softmax of element-wise logit * temperature."""
    if (logits.height, logits.width) != (temps.height, temps.width):
        raise ValidationError("logit and temperature maps must share spatial shape")
    return ProbMap(softmax(logits.data * temps.data[..., None]))


def temperature_nll(logits, temps, labels):
    """Summed NLL of the true class under temperature-scaled logits.

    Returns (loss, gradient of the loss wrt the temperature map, probability
    map). The gradient chains the softmax through the element-wise scaling:
    d loss / d t_ij = sum_c (p_c - [c = y]) * l_c at that pixel.
    """
    logit_arr = logits.data if isinstance(logits, LogitMap) else np.asarray(logits)
    temp_arr = temps.data if isinstance(temps, TemperatureMap) else np.asarray(temps)
    label_arr = _label_array(labels)
    h, w, c = logit_arr.shape
    if temp_arr.shape != (h, w) or label_arr.shape != (h, w):
        raise ValidationError("logits, temperatures and labels must share spatial shape")
    probs = softmax(logit_arr * temp_arr[..., None])
    onehot = np.zeros_like(probs)
    flat = onehot.reshape(-1, c)
    flat[np.arange(h * w), label_arr.reshape(-1)] = 1.0
    picked = (probs * onehot).sum(axis=-1)
    loss = float(-np.log(np.maximum(picked, 1e-12)).sum())
    grad_t = ((probs - onehot) * logit_arr).sum(axis=-1)
    return loss, grad_t, ProbMap(probs)


def temperature_score(temps: TemperatureMap) -> float:
    """Image-level uncertainty from a temperature map: mean of 1/t.

    Degradation lowers temperatures, so the score rises with degradation and
    plugs directly into the deviation-ratio machinery, which only reacts to
    scores above the training mean.
    """
    return float((1.0 / temps.data).mean())


def _loss_and_param_grads(network: Network, x: np.ndarray, logit_arr: np.ndarray,
                          label_arr: np.ndarray, pixel_mean: bool = False):
    """Forward + NLL + backward through the exp activation; returns (loss, grads, caches).

    With pixel_mean the loss and gradients are divided by the pixel count,
    which keeps optimizer step magnitudes independent of image size.
    """
    raw, caches = network.forward(x, train=False)
    temps = temperature_activation(raw[..., 0])
    loss, grad_t, _ = temperature_nll(logit_arr, temps, label_arr)
    # d t / d raw = t inside the clamp, 0 where clamped.
    inside = (temps > TEMP_MIN) & (temps < TEMP_MAX)
    grad_raw = (grad_t * temps * inside)[..., None]
    if pixel_mean:
        scale = 1.0 / label_arr.size
        loss *= scale
        grad_raw = grad_raw * scale
    _, grads = network.backward(caches, grad_raw)
    return loss, grads, caches


class SpatialTemperature(BaseEstimator):
    """Estimator producing per-pixel temperature maps for one frozen expert.

    fit(X, y, expert=...) trains against the expert's logits, keeping
    whichever checkpoint has the best validation NLL; if training never
    beats the identity map (t = 1), the head is zeroed so transform()
    degrades to exactly that identity.
    """

    def __init__(self, modality: str = "a", steps: int = 4000,
                 learning_rate: float = 1e-3, eval_every: int = 200, seed: int = 0):
        self.modality = modality
        self.steps = steps
        self.learning_rate = learning_rate
        self.eval_every = eval_every
        self.seed = seed

    @property
    def input_channels(self) -> int:
        if self.modality not in MODALITY_CHANNELS:
            raise ValidationError(f"unknown modality {self.modality!r}")
        return MODALITY_CHANNELS[self.modality]

    def _mean_val_nll(self, network: Network | None, logit_list, label_list, inputs) -> float:
        total = 0.0
        pixels = 0
        for logit_arr, label_arr, x in zip(logit_list, label_list, inputs):
            if network is None:
                temps = np.ones(label_arr.shape)
            else:
                raw, _ = network.forward(x, train=False)
                temps = temperature_activation(raw[..., 0])
            loss, _, _ = temperature_nll(logit_arr, temps, label_arr)
            total += loss
            pixels += label_arr.size
        return total / pixels

    def fit(self, X, y, expert: SegmentationExpert, X_val=None, y_val=None):
        inputs = [_input_array(x, self.input_channels) for x in X]
        labels = [_label_array(t) for t in y]
        if not inputs or len(inputs) != len(labels):
            raise ValidationError("need matching, non-empty image and label lists")
        expert._require_fitted()
        if X_val is None:
            val_inputs, val_labels = inputs, labels
        else:
            val_inputs = [_input_array(x, self.input_channels) for x in X_val]
            val_labels = [_label_array(t) for t in y_val]
        net_inputs = [standardize_input(a) for a in inputs]
        val_net_inputs = [standardize_input(a) for a in val_inputs]

        logit_cache: dict[int, np.ndarray] = {}

        def train_logits(idx: int) -> np.ndarray:
            if idx not in logit_cache:
                logit_cache[idx] = expert.predict_logits(inputs[idx]).data
            return logit_cache[idx]

        rng = np.random.default_rng(derive_seed(self.seed, 2))
        network = build_tempnet_network(self.input_channels, rng)
        optimizer = Adam(lr=self.learning_rate)
        params = [arr for _, _, arr in network.parameters()]

        val_logits = [expert.predict_logits(x).data for x in val_inputs]
        identity_nll = self._mean_val_nll(None, val_logits, val_labels, val_net_inputs)
        best_val = self._mean_val_nll(network, val_logits, val_labels, val_net_inputs)
        best_state = network.state_arrays()
        history = [(0, float("nan"), best_val)]
        for step in range(1, self.steps + 1):
            idx = int(rng.integers(0, len(inputs)))
            loss, grads, _ = _loss_and_param_grads(
                network, net_inputs[idx], train_logits(idx), labels[idx], pixel_mean=True
            )
            if not np.isfinite(loss):
                raise NumericalError(f"temperature training diverged at step {step}")
            optimizer.step(params, grads)
            if step % self.eval_every == 0 or step == self.steps:
                val_nll = self._mean_val_nll(network, val_logits, val_labels, val_net_inputs)
                history.append((step, loss, val_nll))
                if val_nll < best_val:
                    best_val = val_nll
                    best_state = network.state_arrays()
        network.load_state_arrays(best_state)
        if best_val > identity_nll:
            # Fall back to the exact identity map rather than ship a
            # calibrator that is worse than no calibration.
            head = network.layers[-1]
            head.weight[...] = 0.0
            head.bias[...] = 0.0
            best_val = identity_nll

        self.network_ = network
        self.history_ = history
        self.best_val_nll_ = best_val
        self.identity_val_nll_ = identity_nll
        return self

    def _require_fitted(self) -> Network:
        if not hasattr(self, "network_"):
            raise NotFittedError("this temperature network has not been fitted yet")
        return self.network_

    def transform(self, image) -> TemperatureMap:
        network = self._require_fitted()
        arr = standardize_input(_input_array(image, self.input_channels))
        raw, _ = network.forward(arr, train=False)
        return TemperatureMap(temperature_activation(raw[..., 0]))

    def save(self, path) -> None:
        network = self._require_fitted()
        save_network(
            path,
            network,
            meta={
                "kind": "spatial-temperature",
                "modality": self.modality,
                "steps": self.steps,
                "learning_rate": self.learning_rate,
                "eval_every": self.eval_every,
                "seed": self.seed,
                "best_val_nll": getattr(self, "best_val_nll_", None),
                "identity_val_nll": getattr(self, "identity_val_nll_", None),
            },
        )

    @classmethod
    def load(cls, path) -> "SpatialTemperature":
        network, meta = load_network(path)
        if meta.get("kind") != "spatial-temperature":
            raise ValidationError(f"{path}: not a temperature-network checkpoint")
        tn = cls(
            modality=meta["modality"],
            steps=meta["steps"],
            learning_rate=meta["learning_rate"],
            eval_every=meta["eval_every"],
            seed=meta["seed"],
        )
        tn.network_ = network
        tn.best_val_nll_ = meta.get("best_val_nll")
        tn.identity_val_nll_ = meta.get("identity_val_nll")
        tn.history_ = []
        return tn


def gradient_check_temperature(network: Network, x: np.ndarray, logits: np.ndarray,
                               labels: np.ndarray, tolerance: float = 1e-4,
                               step: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the NLL gradient through scaling and activation."""
    if network.num_parameters() > 5000:
        raise ValidationError("gradient check is limited to networks with <= 5k parameters")
    label_arr = _label_array(labels)

    def loss_only() -> float:
        raw, _ = network.forward(x, train=False)
        temps = temperature_activation(raw[..., 0])
        return temperature_nll(logits, temps, label_arr)[0]

    _, analytic, caches = _loss_and_param_grads(network, x, logits, label_arr)
    margin = kink_margin(network, caches)
    worst = 0.0
    worst_layer = None
    worst_param = None
    for (layer_idx, name, arr), grad in zip(network.parameters(), analytic):
        flat = arr.reshape(-1)
        grad_flat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = loss_only()
            flat[j] = orig - step
            minus = loss_only()
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad_flat[j]), abs(numeric), 1e-6)
            rel = abs(grad_flat[j] - numeric) / denom
            if rel > worst:
                worst, worst_layer, worst_param = rel, layer_idx, name
    return GradCheckReport(
        max_rel_error=worst,
        worst_layer=worst_layer,
        worst_param=worst_param,
        min_kink_margin=margin,
        tolerance=tolerance,
    )
