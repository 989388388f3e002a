"""SGD with momentum, Adam, and a cosine learning-rate schedule.

Optimizers update lists of float64 arrays in place. Their buffers are plain
arrays so run checkpoints can store them alongside the parameters.
"""

from __future__ import annotations

import math
import warnings
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, NonFiniteError


def _check(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], kind: str) -> None:
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"parameter {k}: shape {p.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{kind}.step", f"gradient of parameter {k} is not finite")


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    kind = "sgd-momentum"

    def __init__(self, params: Sequence[np.ndarray], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None):
        _check(params, grads, self.kind)
        lr = self.lr if lr is None else lr
        for p, g, buf in zip(params, grads, self.buffers):
            if buf.shape != p.shape:
                raise DimensionError(f"momentum buffer {buf.shape} does not match parameter {p.shape}")
            buf *= self.momentum
            buf += g + self.weight_decay * p
            p -= lr * buf
        self.steps += 1
        return params

    def state_arrays(self) -> list[np.ndarray]:
        return list(self.buffers)

    def load_state_arrays(self, arrays: Sequence[np.ndarray], steps: int) -> None:
        self.buffers = [np.array(a, dtype=np.float64) for a in arrays]
        self.steps = steps


class Adam:
    """Bias-corrected Adam.

    ``decoupled=False`` adds ``weight_decay * param`` to the gradient (L2);
    ``decoupled=True`` shrinks the parameter directly, AdamW style.
    """

    kind = "adam"

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = False):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None):
        _check(params, grads, self.kind)
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and self.decoupled:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_arrays(self) -> list[np.ndarray]:
        return list(self.m) + list(self.v)

    def load_state_arrays(self, arrays: Sequence[np.ndarray], steps: int) -> None:
        half = len(arrays) // 2
        self.m = [np.array(a, dtype=np.float64) for a in arrays[:half]]
        self.v = [np.array(a, dtype=np.float64) for a in arrays[half:]]
        self.steps = steps


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total``."""
    if total <= 0:
        raise ValueError("total must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > total:
        warnings.warn(f"cosine_lr step {step} beyond total {total}; clamping to 0", stacklevel=2)
        return 0.0
    if step == total:
        return 0.0
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0
