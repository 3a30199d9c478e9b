"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, grad_eval


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: int
    worst_index: tuple[int, ...]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


class FiniteDiffError(FloatingPointError):
    def __init__(self, param_index: int, element: tuple[int, ...]):
        super().__init__(f"non-finite evaluation when perturbing parameter {param_index} at {element}")
        self.param_index = param_index
        self.element = element


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. every element of ``arrays`` (mutated in place, then restored)."""
    out = []
    for p_idx, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FiniteDiffError(p_idx, idx)
            g[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar function with central differences.

    ``f`` maps the parameter tensors to a scalar tensor; parameters must be
    64-bit with ``requires_grad=True``. Returns the largest relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over all
    parameter elements.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check requires float64 parameters")
    analytic = grad_eval(f(params), list(params))

    def scalar() -> float:
        try:
            return float(f(params).data)
        except NonFiniteError:
            return float("nan")

    numeric = numerical_gradient(scalar, [p.data for p in params], h)
    worst = GradCheckResult(0.0, -1, ())
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        if a.size == 0:
            continue
        err = relative_error(a, n)
        j = int(np.argmax(err))
        if err.flat[j] > worst.max_rel_error or worst.worst_param < 0:
            worst = GradCheckResult(float(err.flat[j]), i, np.unravel_index(j, a.shape))
    return worst
