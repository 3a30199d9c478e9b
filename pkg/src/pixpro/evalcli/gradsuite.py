"""Finite-difference suite over every differentiable building block of the model and losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..encoder import PixelPropagation, ppm_forward, similarity
from ..numerics import Tensor, finite_diff_check, ops
from ..objectives import combined_loss, instance_loss, pix_contrast_loss, pixpro_loss

TOL = 1e-4


def _p(rng: np.random.Generator, *shape, positive: bool = False) -> Tensor:
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.1
    return Tensor(a, requires_grad=True, dtype=np.float64)


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(t * Tensor(w))


def _mask(rng: np.random.Generator, n: int, a: int, b: int) -> np.ndarray:
    m = rng.random((n, a, b)) < 0.3
    for i in range(n):
        m[i, rng.integers(a), rng.integers(b)] = True
    return m


def case_conv2d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, k, b = _p(rng, 2, 3, 5, 5), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    out_hw = (5 + 2 * pad - 3) // stride + 1
    w = rng.standard_normal((2, 4, out_hw, out_hw))
    return lambda ps: _weighted(ops.conv2d(ps[0], ps[1], stride, pad, ps[2]), w), [x, k, b]


def case_batch_norm(rng):
    x, g, b = _p(rng, 4, 3, 2, 2), _p(rng, 3), _p(rng, 3)
    w = rng.standard_normal((4, 3, 2, 2))

    def f(ps):
        rm, rv = np.zeros(3), np.ones(3)
        return _weighted(ops.batch_norm(ps[0], ps[1], ps[2], rm, rv, True), w)
    return f, [x, g, b]


def case_cosine(rng):
    a, b = _p(rng, 2, 5, 4), _p(rng, 2, 6, 4)
    w = rng.standard_normal((2, 5, 6))
    return lambda ps: _weighted(ops.cosine_similarity_matrix(ps[0], ps[1]), w), [a, b]


def case_similarity(rng):
    gamma = float(rng.choice([0.5, 1.0, 2.0, 4.0, 8.0]))
    xi = _p(rng, 6, positive=True)
    xj = _p(rng, 6, positive=True)
    return lambda ps: similarity(ps[0], ps[1], gamma), [xi, xj]


def case_ppm(rng):
    layers = int(rng.integers(0, 3))
    gamma = float(rng.choice([1.0, 2.0, 4.0]))
    d = 4
    x = _p(rng, 3, d, 3, 3, positive=True)
    ppm = PixelPropagation(d, layers, gamma, rng, dtype=np.float64)
    params = [p for _, p in ppm.named_parameters()]
    w = rng.standard_normal((3, d, 3, 3))
    # three images so the training-mode BN between transform layers has spread

    def f(ps):
        return _weighted(ppm_forward(ps[0], ppm), w)
    return f, [x] + params


def case_pix_contrast(rng):
    # 2x2 maps and moderate temperatures: with larger instances some gradient
    # entries land near 1e-8, where central-difference round-off alone exceeds
    # the relative tolerance
    ts = [_p(rng, 2, 4, 2, 2) for _ in range(4)]
    mask = _mask(rng, 2, 4, 4)
    tau = float(rng.uniform(0.3, 1.0))
    return lambda ps: pix_contrast_loss(*ps, mask, tau=tau).value, ts


def case_pixpro(rng):
    ts = [_p(rng, 2, 4, 3, 3) for _ in range(4)]
    mask = _mask(rng, 2, 9, 9)
    return lambda ps: pixpro_loss(*ps, mask).value, ts


def case_instance(rng):
    ts = [_p(rng, 4, 5) for _ in range(4)]
    tau = float(rng.uniform(0.2, 1.0))
    return lambda ps: instance_loss(*ps, tau=tau), ts


def case_combined(rng):
    pix = [_p(rng, 2, 4, 2, 2) for _ in range(4)]
    inst = [_p(rng, 2, 3) for _ in range(4)]
    mask = _mask(rng, 2, 4, 4)
    alpha = float(rng.uniform(0.1, 2.0))

    def f(ps):
        p = pixpro_loss(*ps[:4], mask)
        return combined_loss(p, instance_loss(*ps[4:], tau=0.3), alpha).total
    return f, pix + inst


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "batch_norm": case_batch_norm,
    "cosine_similarity": case_cosine,
    "similarity": case_similarity,
    "ppm_forward": case_ppm,
    "pix_contrast_loss": case_pix_contrast,
    "pixpro_loss": case_pixpro,
    "instance_loss": case_instance,
    "combined_loss": case_combined,
}


@dataclass
class SuiteResult:
    case: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOL


def run_gradient_suite(seed: int = 0, instances: int = 20, cases: list[str] | None = None) -> list[SuiteResult]:
    out = []
    names = list(CASES)
    for name in cases or names:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), names.index(name)]))
        worst = 0.0
        for _ in range(instances):
            f, params = CASES[name](rng)
            worst = max(worst, finite_diff_check(f, params).max_rel_error)
        out.append(SuiteResult(name, instances, worst))
    return out
