"""LARS optimiser and the learning-rate / momentum schedules."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..encoder import momentum_schedule  # noqa: F401  (re-exported)
from ..numerics import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


def excluded_from_adaptation(name: str) -> bool:
    """Biases and BN affine parameters get neither weight decay nor trust scaling."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "gamma", "beta")


def trust_ratio(w: np.ndarray, g: np.ndarray, weight_decay: float, trust_coeff: float, eps: float = 1e-8) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(g))
    if w_norm > 0 and g_norm > 0:
        return trust_coeff * w_norm / (g_norm + weight_decay * w_norm + eps)
    return 1.0


class LARS:
    """Layer-wise adaptive rate scaling with heavy-ball momentum.

    For each adapted parameter, ``d = (g + wd * w) * trust_ratio``; biases and
    BN parameters use ``d = g``. Then ``buf = momentum * buf + d`` and
    ``w -= lr * buf``.
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], weight_decay: float = 1e-5,
                 momentum: float = 0.9, trust_coeff: float = 0.001, eps: float = 1e-8):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.trust_coeff = trust_coeff
        self.eps = eps
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            if excluded_from_adaptation(name):
                d = g
            else:
                d = (g + self.weight_decay * p.data) * trust_ratio(
                    p.data, g, self.weight_decay, self.trust_coeff, self.eps)
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[name] = buf.astype(p.dtype)
            p.data = (p.data - lr * buf).astype(p.dtype)


def lars_step(params: Sequence[tuple[str, Tensor]], lr: float, weight_decay: float = 1e-5,
              trust_coeff: float = 0.001, momentum: float = 0.9,
              state: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Single functional LARS update; returns the momentum buffers."""
    opt = LARS(params, weight_decay, momentum, trust_coeff)
    if state is not None:
        opt.buffers = state
    opt.step(lr)
    return opt.buffers


def cosine_lr(step: int, total_steps: int, lr_effective: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``lr_effective`` then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return lr_effective * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_effective
    return lr_effective * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))
