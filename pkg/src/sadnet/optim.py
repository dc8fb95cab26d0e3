"""Stochastic first-order optimizers updating a Model's parameters in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError, ValidationError
from .nn import Model


@dataclass
class OptimizerState:
    """Per-parameter moment buffers and step counter.

    m/v are allocated lazily on the first Adam step so the state can be
    created before the model is initialized. last_max_update records the
    largest |delta w| of the most recent step (used by training guards).
    """

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    t: int = 0
    last_max_update: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("beta1/beta2 must lie in (0, 1)")


def make_optimizer(kind: str, lr: float = 0.001, **kwargs) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, **kwargs)


def _require_grads(model: Model):
    if not model.grads_ready:
        raise StateError("optimizer step before backward: gradients not populated")


def sgd_step(model: Model, state: OptimizerState) -> None:
    """w <- w - lr * g for every parameter."""
    _require_grads(model)
    state.t += 1
    worst = 0.0
    for p, g in zip(model.parameters(), model.gradients()):
        p -= state.lr * g
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        worst = max(worst, state.lr * gmax)
    state.last_max_update = worst


def adam_step(model: Model, state: OptimizerState) -> None:
    """Adam update with bias correction; eps added outside the square root."""
    _require_grads(model)
    params = model.parameters()
    grads = model.gradients()
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    worst = 0.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update
        if update.size:
            worst = max(worst, float(np.max(np.abs(update))))
    state.last_max_update = worst


def step(model: Model, state: OptimizerState) -> None:
    if state.kind == "adam":
        adam_step(model, state)
    else:
        sgd_step(model, state)
