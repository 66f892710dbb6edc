"""Dense network engine: exact forward/backward, freeze masks and plain SGD.

Arrays are float64 numpy matrices. A weight matrix has shape
``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class LayoutError(ValueError):
    pass


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    # Final layer only. Forward emits logits; the softmax lives inside
    # cross_entropy_loss so its gradient arrives pre-fused.
    SOFTMAX = "softmax"


class CachePolicy(enum.Enum):
    STORE_TRAINABLE = "trainable"
    STORE_ALL = "all"
    STORE_NONE = "none"


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"weights must be a non-empty matrix, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match fan_out {self.weights.shape[1]}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


def init_dense(
    fan_in: int,
    fan_out: int,
    activation: Activation | str,
    rng: np.random.Generator,
) -> DenseLayer:
    """He-uniform weights for ReLU layers, Glorot-uniform otherwise; zero bias."""
    activation = Activation(activation)
    if activation is Activation.RELU:
        limit = np.sqrt(6.0 / fan_in)
    else:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return DenseLayer(w, np.zeros(fan_out), activation)


def check_chain(layers: Sequence[DenseLayer], input_dim: int | None = None) -> None:
    if not layers:
        raise ShapeError("empty layer list")
    if input_dim is not None and layers[0].fan_in != input_dim:
        raise ShapeError(f"input has {input_dim} columns, first layer expects {layers[0].fan_in}")
    for i in range(1, len(layers)):
        if layers[i - 1].fan_out != layers[i].fan_in:
            raise ShapeError(
                f"layer {i - 1} emits {layers[i - 1].fan_out} features, "
                f"layer {i} expects {layers[i].fan_in}"
            )
    for i, layer in enumerate(layers[:-1]):
        if layer.activation is Activation.SOFTMAX:
            raise ShapeError(f"softmax layer at position {i} is not final")


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Per-layer ``(fan_in, fan_out)`` shapes; each layer packs W then b."""

    shapes: tuple[tuple[int, int], ...]
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offs = [0]
        for fi, fo in self.shapes:
            offs.append(offs[-1] + fi * fo + fo)
        object.__setattr__(self, "offsets", tuple(offs))

    @classmethod
    def of(cls, layers: Sequence[DenseLayer]) -> "ParamLayout":
        return cls(tuple((l.fan_in, l.fan_out) for l in layers))

    @property
    def size(self) -> int:
        return self.offsets[-1]

    def layer_range(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])


@dataclass
class ParamVector:
    data: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise LayoutError(f"data length {self.data.size} != layout size {self.layout.size}")

    def layer_slice(self, i: int) -> np.ndarray:
        return self.data[self.layout.layer_range(i)]

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)


def pack(layers: Sequence[DenseLayer]) -> ParamVector:
    layout = ParamLayout.of(layers)
    data = np.empty(layout.size)
    for i, layer in enumerate(layers):
        seg = data[layout.layer_range(i)]
        seg[: layer.weights.size] = layer.weights.ravel()
        seg[layer.weights.size :] = layer.bias
    return ParamVector(data, layout)


def unpack(vec: ParamVector, template: Sequence[DenseLayer]) -> list[DenseLayer]:
    """Rebuild layers from ``vec``, taking activations from ``template``."""
    if ParamLayout.of(template) != vec.layout:
        raise LayoutError("vector layout does not match template layers")
    out = []
    for i, (layer, (fi, fo)) in enumerate(zip(template, vec.layout.shapes)):
        seg = vec.layer_slice(i)
        out.append(
            DenseLayer(seg[: fi * fo].reshape(fi, fo).copy(), seg[fi * fo :].copy(), layer.activation)
        )
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _first_trainable(trainable: Sequence[bool]) -> int:
    for i, t in enumerate(trainable):
        if t:
            return i
    return len(trainable)


def forward(
    layers: Sequence[DenseLayer],
    x: np.ndarray,
    cache_policy: CachePolicy = CachePolicy.STORE_ALL,
    trainable: Sequence[bool] | None = None,
) -> tuple[np.ndarray, list]:
    """Run ``x`` through ``layers``.

    The cache holds ``(input, pre_activation)`` per layer, or ``None`` where
    nothing was stored. ``STORE_TRAINABLE`` keeps entries from the first
    trainable layer onwards; backward never needs anything below it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {x.shape}")
    check_chain(layers, x.shape[1])
    if cache_policy is CachePolicy.STORE_TRAINABLE:
        if trainable is None:
            raise ValueError("STORE_TRAINABLE needs a trainable mask")
        store_from = _first_trainable(trainable)
    elif cache_policy is CachePolicy.STORE_ALL:
        store_from = 0
    else:
        store_from = len(layers)

    cache: list = []
    h = x
    for i, layer in enumerate(layers):
        z = h @ layer.weights + layer.bias
        cache.append((h, z) if i >= store_from else None)
        h = _activate(z, layer.activation)
    return h, cache


def _layer_grads(
    layers: Sequence[DenseLayer],
    cache: Sequence,
    loss_grad: np.ndarray,
    trainable: Sequence[bool],
) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Per-layer ``(dW, db)``; ``None`` for frozen layers."""
    if len(trainable) != len(layers) or len(cache) != len(layers):
        raise LayoutError("mask, cache and layers must have equal length")
    grads: list = [None] * len(layers)
    stop = _first_trainable(trainable)
    dh = np.asarray(loss_grad, dtype=np.float64)
    for i in range(len(layers) - 1, stop - 1, -1):
        entry = cache[i]
        if entry is None:
            raise CacheError(f"no cached activation for layer {i}")
        h, z = entry
        layer = layers[i]
        dz = dh * (z > 0) if layer.activation is Activation.RELU else dh
        if trainable[i]:
            grads[i] = (h.T @ dz, dz.sum(axis=0))
        if i > stop:
            dh = dz @ layer.weights.T
    return grads


def backward(
    layers: Sequence[DenseLayer],
    cache: Sequence,
    loss_grad: np.ndarray,
    trainable: Sequence[bool],
) -> ParamVector:
    """Gradient of the loss over every layer's parameters.

    Frozen layers get exact zeros. ``loss_grad`` is the derivative with
    respect to the final layer's output (its logits for a softmax layer).
    """
    grads = _layer_grads(layers, cache, loss_grad, trainable)
    layout = ParamLayout.of(layers)
    data = np.zeros(layout.size)
    for i, g in enumerate(grads):
        if g is None:
            continue
        seg = data[layout.layer_range(i)]
        dw, db = g
        seg[: dw.size] = dw.ravel()
        seg[dw.size :] = db
    return ParamVector(data, layout)


# ---------------------------------------------------------------------------
# Loss and optimiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    local_epochs: int = 5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sums) - shifted[rows, labels]))
    grad = exp / sums[:, None]
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def sgd_step(params: ParamVector, grad: ParamVector, cfg: SgdConfig) -> ParamVector:
    if params.layout != grad.layout:
        raise LayoutError("parameter and gradient layouts differ")
    return ParamVector(params.data - cfg.learning_rate * grad.data, params.layout)


def predict(layers: Sequence[DenseLayer], x: np.ndarray) -> np.ndarray:
    out, _ = forward(layers, x, CachePolicy.STORE_NONE)
    return out.argmax(axis=1)


def accuracy(layers: Sequence[DenseLayer], x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(layers, x) == y))


def train_sgd(
    layers: Sequence[DenseLayer],
    trainable: Sequence[bool],
    x: np.ndarray,
    y: np.ndarray,
    cfg: SgdConfig,
    rng: np.random.Generator,
) -> tuple[list[DenseLayer], float]:
    """Minibatch SGD on cross-entropy for ``cfg.local_epochs`` epochs.

    Returns fresh layer copies (frozen ones untouched) and the mean batch
    loss of the last epoch (nan when no epoch ran).
    """
    layers = [l.copy() for l in layers]
    n = len(y)
    last = float("nan")
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, cache = forward(layers, x[idx], CachePolicy.STORE_TRAINABLE, trainable)
            loss, g = cross_entropy_loss(out, y[idx])
            losses.append(loss)
            for layer, lg in zip(layers, _layer_grads(layers, cache, g, trainable)):
                if lg is not None:
                    layer.weights -= cfg.learning_rate * lg[0]
                    layer.bias -= cfg.learning_rate * lg[1]
        last = float(np.mean(losses)) if losses else float("nan")
    return layers, last
