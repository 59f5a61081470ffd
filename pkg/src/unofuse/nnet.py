"""Minimal differentiable-network substrate: forward, hand-derived backward, Adam.

Layers operate on (H, W, C) float64 arrays, one image at a time. Supported
kinds: 3x3 conv (stride 1, zero padding 1), 1x1 conv, relu, inverted
dropout, 2x2 max pooling, and 2x nearest-neighbor upsampling. Networks are
mutable during training and must stay on one worker; inference on a frozen
network is read-only and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericalError, ValidationError
from .fields import softmax
from .io import pack_field, unpack_field


@dataclass
class _ForwardCtx:
    train: bool
    force_dropout: bool
    rng: np.random.Generator | None


def _as_rng(rng) -> np.random.Generator | None:
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))


def _conv3x3(x: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 correlation with zero padding 1. Returns (output, im2col patches)."""
    h, w, cin = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * cin)
    out = patches @ weight.reshape(9 * cin, -1)
    return out.reshape(h, w, -1), patches


class Conv:
    """Convolution with stride 1; kernel size 3 uses zero padding 1, size 1 none."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng=None):
        if kernel_size not in (1, 3):
            raise ValidationError(f"kernel_size must be 1 or 3, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ValidationError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        k = kernel_size
        fan_in = k * k * in_channels
        fan_out = k * k * out_channels
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        gen = _as_rng(rng) or np.random.default_rng()
        self.weight = gen.uniform(-bound, bound, size=(k, k, in_channels, out_channels))
        self.bias = np.zeros(out_channels)

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
        }

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray, ctx: _ForwardCtx):
        if x.shape[2] != self.in_channels:
            raise ValidationError(
                f"conv expects {self.in_channels} input channels, got {x.shape[2]}"
            )
        if self.kernel_size == 1:
            flat = x.reshape(-1, self.in_channels)
            out = flat @ self.weight.reshape(self.in_channels, self.out_channels)
            out = out.reshape(x.shape[0], x.shape[1], self.out_channels)
            cache = (x.shape, flat)
        else:
            out, patches = _conv3x3(x, self.weight)
            cache = (x.shape, patches)
        return out + self.bias, cache

    def backward(self, grad_out: np.ndarray, cache):
        x_shape, cols = cache
        h, w, cin = x_shape
        if grad_out.shape != (h, w, self.out_channels):
            raise ValidationError("stale cache: gradient shape does not match forward pass")
        flat_grad = grad_out.reshape(h * w, self.out_channels)
        grad_w = (cols.T @ flat_grad).reshape(self.weight.shape)
        grad_b = flat_grad.sum(axis=0)
        if self.kernel_size == 1:
            grad_x = flat_grad @ self.weight.reshape(cin, self.out_channels).T
            grad_x = grad_x.reshape(x_shape)
        else:
            # Input gradient = correlation of grad_out with the spatially
            # flipped, channel-transposed kernel.
            flipped = self.weight[::-1, ::-1].transpose(0, 1, 3, 2)
            grad_x, _ = _conv3x3(grad_out, np.ascontiguousarray(flipped))
        return grad_x, {"weight": grad_w, "bias": grad_b}


class ReLU:
    kind = "relu"

    def spec(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, ctx: _ForwardCtx):
        return np.maximum(x, 0.0), x

    def backward(self, grad_out: np.ndarray, cache):
        if grad_out.shape != cache.shape:
            raise ValidationError("stale cache: gradient shape does not match forward pass")
        return grad_out * (cache > 0.0), {}


class Dropout:
    """Inverted dropout: active in train mode (or when forced), identity otherwise."""

    kind = "dropout"

    def __init__(self, rate: float):
        rate = float(rate)
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def spec(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, ctx: _ForwardCtx):
        active = (ctx.train or ctx.force_dropout) and self.rate > 0.0
        if not active:
            return x, None
        if ctx.rng is None:
            raise ValidationError("active dropout requires an rng seed for reproducibility")
        keep = 1.0 - self.rate
        mask = (ctx.rng.random(x.shape) >= self.rate) / keep
        return x * mask, mask

    def backward(self, grad_out: np.ndarray, cache):
        if cache is None:
            return grad_out, {}
        if grad_out.shape != cache.shape:
            raise ValidationError("stale cache: gradient shape does not match forward pass")
        return grad_out * cache, {}


class MaxPool2:
    """2x2 max pooling, stride 2. Requires even spatial dims."""

    kind = "maxpool2"

    def spec(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    @staticmethod
    def _windows(x: np.ndarray) -> np.ndarray:
        h, w, c = x.shape
        return (
            x.reshape(h // 2, 2, w // 2, 2, c)
            .transpose(0, 2, 4, 1, 3)
            .reshape(h // 2, w // 2, c, 4)
        )

    def forward(self, x: np.ndarray, ctx: _ForwardCtx):
        h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ValidationError(f"maxpool2 needs even spatial dims, got {(h, w)}")
        windows = self._windows(x)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx, x)

    def backward(self, grad_out: np.ndarray, cache):
        x_shape, idx, _ = cache
        h, w, c = x_shape
        if grad_out.shape != (h // 2, w // 2, c):
            raise ValidationError("stale cache: gradient shape does not match forward pass")
        spread = np.zeros((h // 2, w // 2, c, 4))
        np.put_along_axis(spread, idx[..., None], grad_out[..., None], axis=-1)
        grad_x = (
            spread.reshape(h // 2, w // 2, c, 2, 2)
            .transpose(0, 3, 1, 4, 2)
            .reshape(h, w, c)
        )
        return grad_x, {}


class Upsample2:
    """2x nearest-neighbor upsampling."""

    kind = "upsample2"

    def spec(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, ctx: _ForwardCtx):
        return x.repeat(2, axis=0).repeat(2, axis=1), x.shape

    def backward(self, grad_out: np.ndarray, cache):
        h, w, c = cache
        if grad_out.shape != (2 * h, 2 * w, c):
            raise ValidationError("stale cache: gradient shape does not match forward pass")
        return grad_out.reshape(h, 2, w, 2, c).sum(axis=(1, 3)), {}


_LAYER_KINDS = {cls.kind: cls for cls in (Conv, ReLU, Dropout, MaxPool2, Upsample2)}


class Network:
    """Ordered layer list over (H, W, C) fields."""

    def __init__(self, layers, in_channels: int):
        self.layers = list(layers)
        self.in_channels = int(in_channels)

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, spec: list[dict], in_channels: int, rng=None) -> "Network":
        gen = _as_rng(rng) or np.random.default_rng(0)
        layers = []
        for entry in spec:
            kind = entry.get("kind")
            if kind not in _LAYER_KINDS:
                raise ValidationError(f"unknown layer kind {kind!r}")
            if kind == "conv":
                layers.append(
                    Conv(entry["in_channels"], entry["out_channels"], entry["kernel_size"], gen)
                )
            elif kind == "dropout":
                layers.append(Dropout(entry["rate"]))
            else:
                layers.append(_LAYER_KINDS[kind]())
        return cls(layers, in_channels)

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((i, name, arr))
        return out

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.parameters())

    def state_arrays(self) -> list[np.ndarray]:
        return [arr.copy() for _, _, arr in self.parameters()]

    def load_state_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValidationError("parameter count mismatch while loading state")
        for (_, _, dst), src in zip(params, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ValidationError(
                    f"parameter shape mismatch: {src.shape} vs {dst.shape}"
                )
            dst[...] = src

    def forward(self, x, train: bool = False, rng=None, force_dropout: bool = False):
        """Run all layers; returns (output, caches) with caches aligned to layers."""
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"network input must be (H, W, C), got shape {arr.shape}")
        if arr.shape[2] != self.in_channels:
            raise ValidationError(
                f"network expects {self.in_channels} input channels, got {arr.shape[2]}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("network input contains non-finite values")
        ctx = _ForwardCtx(train=train, force_dropout=force_dropout, rng=_as_rng(rng))
        caches = []
        out = arr
        for layer in self.layers:
            out, cache = layer.forward(out, ctx)
            caches.append(cache)
        return out, caches

    def backward(self, caches, grad_out: np.ndarray):
        """Backpropagate; returns (grad wrt input, gradients aligned with parameters())."""
        if len(caches) != len(self.layers):
            raise ValidationError("stale cache: layer count mismatch")
        grad = np.asarray(grad_out, dtype=np.float64)
        per_layer: list[dict] = [{} for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            grad, param_grads = self.layers[i].backward(grad, caches[i])
            per_layer[i] = param_grads
        flat = [per_layer[i][name] for i, name, _ in self.parameters()]
        return grad, flat


class Adam:
    """Adam with bias correction; moments are allocated lazily from the first step."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValidationError("optimizer state does not match parameter list")
        for i, g in enumerate(grads):
            if g.shape != params[i].shape:
                raise ValidationError(
                    f"gradient shape {g.shape} does not match parameter {params[i].shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericalError(
                    f"non-finite gradient in parameter {i}: "
                    f"|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'}"
                )
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross-entropy and its gradient wrt the logits."""
    h, w, c = logits.shape
    if labels.shape != (h, w):
        raise ValidationError(f"labels shape {labels.shape} does not match logits {(h, w)}")
    probs = softmax(logits).reshape(-1, c)
    flat_labels = labels.reshape(-1)
    n = probs.shape[0]
    picked = probs[np.arange(n), flat_labels]
    loss = float(-np.log(np.maximum(picked, 1e-12)).mean())
    grad = probs.copy()
    grad[np.arange(n), flat_labels] -= 1.0
    grad /= n
    return loss, grad.reshape(h, w, c)


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients against central finite differences."""

    max_rel_error: float
    worst_layer: int | None
    worst_param: str | None
    min_kink_margin: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_error <= self.tolerance


def kink_margin(network: Network, caches) -> float:
    """Distance of the closest relu/pool pre-activation to its decision point.

    Finite differences are only trustworthy when no perturbation can flip a
    relu sign or a pooling argmax; callers should resample inputs when the
    margin is small relative to the step size.
    """
    margin = np.inf
    for layer, cache in zip(network.layers, caches):
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(cache).min()))
        elif isinstance(layer, MaxPool2):
            windows = MaxPool2._windows(cache[2])
            top2 = np.partition(windows, -2, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
    return margin


def gradient_check(network: Network, x: np.ndarray, labels: np.ndarray,
                   tolerance: float = 1e-4, step: float = 1e-5,
                   train: bool = False, rng_seed: int = 0) -> GradCheckReport:
    """Compare analytic parameter gradients against central finite differences.

    Intended for small networks (<= 5k parameters). The loss is mean
    cross-entropy against `labels`; dropout layers use a fixed seed so both
    sides of each difference see identical masks.
    """
    if network.num_parameters() > 5000:
        raise ValidationError("gradient_check is limited to networks with <= 5k parameters")

    def loss_only() -> float:
        out, _ = network.forward(x, train=train, rng=rng_seed)
        return cross_entropy(out, labels)[0]

    out, caches = network.forward(x, train=train, rng=rng_seed)
    _, grad_out = cross_entropy(out, labels)
    _, analytic = network.backward(caches, grad_out)
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
                worst = rel
                worst_layer = layer_idx
                worst_param = name
    return GradCheckReport(
        max_rel_error=worst,
        worst_layer=worst_layer,
        worst_param=worst_param,
        min_kink_margin=margin,
        tolerance=tolerance,
    )


def save_network(path, network: Network, meta: dict | None = None) -> None:
    """Checkpoint format: one JSON header line, then one field record per parameter."""
    header = {
        "format": "unofuse-checkpoint-v1",
        "in_channels": network.in_channels,
        "architecture": network.spec(),
        "meta": meta or {},
        "params": [
            {"layer": i, "name": name, "shape": list(arr.shape)}
            for i, name, arr in network.parameters()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, _, arr in network.parameters():
            fh.write(pack_field(arr.reshape(-1, 1, 1)))


def load_network(path) -> tuple[Network, dict]:
    raw = open(path, "rb").read()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode())
    if header.get("format") != "unofuse-checkpoint-v1":
        raise ValidationError(f"{path}: not a network checkpoint")
    network = Network.from_spec(header["architecture"], header["in_channels"])
    offset = newline + 1
    arrays = []
    for entry in header["params"]:
        payload, offset = unpack_field(raw, offset)
        arrays.append(payload.reshape(entry["shape"]))
    network.load_state_arrays(arrays)
    return network, header.get("meta", {})
