"""Finite-difference verification of every analytic gradient.

Central differences with h = 1e-5 against the backward pass, on batches
of randomly generated small models. Relative error uses an absolute
floor of 1e-8 so coordinates whose true partial is ~0 do not blow up
the ratio.
"""

from __future__ import annotations

import numpy as np

from . import nn

H_DEFAULT = 1e-5
REL_TOLERANCE = 1e-6
ABS_FLOOR = 1e-8


def _batch_loss(model: nn.Model, images, labels, l2: float) -> float:
    loss = nn.cross_entropy(model.forward(images, cache=False), labels)
    return loss.mean_loss + nn.l2_penalty(model, l2)


def analytic_gradients(model: nn.Model, images, labels, l2: float = 0.0) -> list[np.ndarray]:
    loss = nn.cross_entropy(model.forward(images), labels)
    model.backward(loss.logit_gradient)
    if l2:
        nn.add_l2_gradients(model, l2)
    return [g.copy() for g in model.gradients()]


def numerical_gradients(model: nn.Model, images, labels, l2: float = 0.0,
                        h: float = H_DEFAULT) -> list[np.ndarray]:
    """Central differences, one coordinate at a time."""
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = _batch_loss(model, images, labels, l2)
            flat_p[i] = orig - h
            down = _batch_loss(model, images, labels, l2)
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray],
                       floor: float = ABS_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def random_small_model(rng: np.random.Generator) -> nn.Model:
    """Alternate tiny MLPs (< 500 params) and CNNs on 1x8x8 inputs."""
    if rng.integers(0, 2) == 0:
        in_dim = int(rng.integers(3, 9))
        hidden = int(rng.integers(2, 9))
        k = int(rng.integers(2, 6))
        model = nn.build_mlp(in_dim, hidden, k)
    else:
        channels = int(rng.integers(1, 3))
        k = int(rng.integers(2, 5))
        layers = [
            nn.Conv2d(1, channels, 3, pad=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(), nn.Dense(channels * 4 * 4, k),
        ]
        arch = {"kind": "gradcheck-cnn", "channels": channels, "class_count": k}
        model = nn.Model(layers, (1, 8, 8), k, arch)
    nn.init_xavier_uniform(model, rng)
    for layer in model.layers:
        if layer.params:
            # nonzero biases so their partials are exercised off the origin
            layer.params[1][...] = rng.uniform(-0.1, 0.1, size=layer.params[1].shape)
    return model


def gradcheck_suite(seed: int, n_models: int = 20, batch: int = 4,
                    l2_every: int = 5) -> tuple[float, list[dict]]:
    """Run the finite-difference suite; returns (max rel error, per-model detail)."""
    rng = np.random.default_rng((seed, 909))
    details = []
    worst = 0.0
    for index in range(n_models):
        model = random_small_model(rng)
        images = rng.normal(0.0, 1.0, size=(batch, *model.input_shape))
        labels = rng.integers(0, model.class_count, size=batch)
        l2 = 0.01 if index % l2_every == l2_every - 1 else 0.0
        err = max_relative_error(
            analytic_gradients(model, images, labels, l2),
            numerical_gradients(model, images, labels, l2))
        worst = max(worst, err)
        details.append({"model": model.arch.get("kind"),
                        "params": model.parameter_count(), "l2": l2, "max_rel_err": err})
    return worst, details
