"""Layers with explicit forward/backward passes, model builders, loss.

Models emit raw logits; softmax lives inside the cross-entropy loss so
the logit gradient has the closed form (softmax - onehot) / batch.
Parameter order is fixed everywhere: layer order, weights before biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, StateError, ValidationError


class Layer:
    """Base layer: parameter/gradient lists plus cached forward state."""

    kind = "?"

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        self._cache = None

    def forward(self, x, cache=True):
        raise NotImplementedError

    def backward(self, delta):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return self._cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.w = T.zeros((in_dim, out_dim))
        self.b = T.zeros(out_dim)
        self.params = [self.w, self.b]
        self.grads = [T.zeros((in_dim, out_dim)), T.zeros(out_dim)]

    def forward(self, x, cache=True):
        out = T.matmul(x, self.w) + self.b
        self._cache = x if cache else None
        return out

    def backward(self, delta):
        x = self._take_cache()
        self.grads[0][...] = T.matmul(x.T, delta)
        self.grads[1][...] = delta.sum(axis=0)
        return T.matmul(delta, self.w.T)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, cache=True):
        self._cache = x if cache else None
        return T.relu(x)

    def backward(self, delta):
        return T.relu_backward(delta, self._take_cache())


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_hw: int, pad: int):
        super().__init__()
        self.kernels = T.zeros((out_channels, in_channels, kernel_hw, kernel_hw))
        self.bias = T.zeros(out_channels)
        self.pad = pad
        self.params = [self.kernels, self.bias]
        self.grads = [np.zeros_like(self.kernels), np.zeros_like(self.bias)]

    def forward(self, x, cache=True):
        out = T.conv2d_batch(x, self.kernels, self.bias, self.pad)
        self._cache = x if cache else None
        return out

    def backward(self, delta):
        x = self._take_cache()
        dx, dk, db = T.conv2d_backward_batch(x, self.kernels, self.pad, delta)
        self.grads[0][...] = dk
        self.grads[1][...] = db
        return dx


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def forward(self, x, cache=True):
        out, idx = T.maxpool2d_batch(x, self.window)
        self._cache = (idx, x.shape) if cache else None
        return out

    def backward(self, delta):
        idx, in_shape = self._take_cache()
        return T.maxpool2d_backward_batch(idx, delta, self.window, in_shape)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, cache=True):
        self._cache = x.shape if cache else None
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))

    def backward(self, delta):
        return delta.reshape(self._take_cache())


class Model:
    """Ordered layer stack mapping a batch to (batch, class_count) logits."""

    def __init__(self, layers: list[Layer], input_shape: tuple, class_count: int, arch: dict):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self.arch = arch
        self.grads_ready = False

    def prepare_batch(self, batch: np.ndarray) -> np.ndarray:
        """Reshape (B, ...) input to the model's input shape when sizes agree."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] == self.input_shape:
            return batch
        want = math.prod(self.input_shape)
        if math.prod(batch.shape[1:]) == want:
            return batch.reshape(batch.shape[0], *self.input_shape)
        raise ShapeError(f"batch shape {batch.shape[1:]} incompatible with model input {self.input_shape}")

    def forward(self, batch: np.ndarray, cache: bool = True) -> np.ndarray:
        out = self.prepare_batch(batch)
        for layer in self.layers:
            out = layer.forward(out, cache=cache)
        return out

    def backward(self, logit_gradient: np.ndarray) -> None:
        delta = logit_gradient
        for layer in reversed(self.layers):
            delta = layer.backward(delta)
        self.grads_ready = True

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def zero_grads(self) -> None:
        for g in self.gradients():
            g[...] = 0.0
        self.grads_ready = False

    def flatten_parameters(self) -> np.ndarray:
        """Concatenate all parameters (layer order, weights before biases)."""
        return np.concatenate([p.ravel() for p in self.parameters()])

    def flatten_gradients(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.gradients()])

    def set_flat_parameters(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for p in self.parameters():
            n = p.size
            p[...] = vec[offset:offset + n].reshape(p.shape)
            offset += n
        if offset != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, model needs {offset}")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class LossValue:
    """Mean cross-entropy (nats) and its gradient w.r.t. the logits."""

    mean_loss: float
    logit_gradient: np.ndarray


PROB_FLOOR = 1e-12  # keeps -log finite once memorization saturates


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean -log softmax(logits)[label] over the batch, with clipped probs."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValidationError(f"labels must lie in [0, {k})")
    probs = T.softmax(logits, axis=1)
    picked = np.clip(probs[np.arange(b), labels], PROB_FLOOR, None)
    mean_loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return LossValue(mean_loss, grad)


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


def backward(model: Model, loss: LossValue) -> None:
    model.backward(loss.logit_gradient)


def l2_penalty(model: Model, lam: float) -> float:
    """lam * sum of squared weight entries (biases excluded)."""
    if lam < 0:
        raise ValidationError(f"l2 lambda must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    total = 0.0
    for layer in model.layers:
        if layer.params:
            w = layer.params[0]
            total += float(np.sum(w * w))
    return lam * total


def add_l2_gradients(model: Model, lam: float) -> None:
    """Add 2*lam*W to each weight gradient in place (biases untouched)."""
    if lam < 0:
        raise ValidationError(f"l2 lambda must be >= 0, got {lam}")
    if lam == 0:
        return
    for layer in model.layers:
        if layer.params:
            layer.grads[0] += 2.0 * lam * layer.params[0]


def init_xavier_uniform(model: Model, rng: np.random.Generator) -> None:
    """Sample weights U[-a, a] with a = sqrt(6 / (fan_in + fan_out)); zero biases.

    Dense fans are the matrix dims; conv fans are C_in*kh*kw and C_out*kh*kw.
    """
    for layer in model.layers:
        if not layer.params:
            continue
        w = layer.params[0]
        if layer.kind == "dense":
            fan_in, fan_out = w.shape
        elif layer.kind == "conv":
            o, c, kh, kw = w.shape
            fan_in, fan_out = c * kh * kw, o * kh * kw
        else:
            raise ValidationError(f"no fan rule for layer kind {layer.kind}")
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-a, a, size=w.shape)
        layer.params[1][...] = 0.0


def build_mlp(input_dim: int, hidden: int, k: int) -> Model:
    """Fully connected net: dense(input->hidden), relu, dense(hidden->k)."""
    layers = [Dense(input_dim, hidden), ReLU(), Dense(hidden, k)]
    arch = {"kind": "mlp", "input_dim": input_dim, "hidden": hidden, "class_count": k}
    return Model(layers, (input_dim,), k, arch)


def build_cnn(input_channels: int, input_hw: int, k: int) -> Model:
    """LeNet-style stack: three 5x5 conv blocks (16/32/64 filters, pad 2 keeps
    the spatial size), max pooling after the first two, then dense 84 -> k.

    input_hw must be divisible by 4 so both pools land on even extents.
    """
    if input_hw % 4:
        raise ShapeError(f"input_hw must be divisible by 4, got {input_hw}")
    final_hw = input_hw // 4
    flat = 64 * final_hw * final_hw
    layers = [
        Conv2d(input_channels, 16, 5, pad=2), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 5, pad=2), ReLU(), MaxPool2d(2),
        Conv2d(32, 64, 5, pad=2), ReLU(),
        Flatten(), Dense(flat, 84), ReLU(), Dense(84, k),
    ]
    arch = {"kind": "cnn", "input_channels": input_channels, "input_hw": input_hw, "class_count": k}
    return Model(layers, (input_channels, input_hw, input_hw), k, arch)


def build_from_descriptor(arch: dict) -> Model:
    """Rebuild a model from its checkpoint architecture descriptor."""
    kind = arch.get("kind")
    if kind == "mlp":
        return build_mlp(arch["input_dim"], arch["hidden"], arch["class_count"])
    if kind == "cnn":
        return build_cnn(arch["input_channels"], arch["input_hw"], arch["class_count"])
    raise ValidationError(f"unknown architecture kind: {kind!r}")
