from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    rel_errors: list[np.ndarray]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((float(e.max()) if e.size else 0.0) for e in self.rel_errors)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max relative error {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def _relative(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.where(diff == 0, 0.0, diff / scale)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    oracle: Callable[..., Tensor] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``oracle`` (default ``f``) is the function differenced numerically. Pass a
    separate one when ``f`` contains gradient reversal: the oracle must write
    the reversed path with an explicit sign flip, since reversal is invisible
    in the forward value.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    g = oracle or f
    numeric = []
    with no_grad():
        for t in xs:
            num = np.zeros_like(t.data)
            flat, nflat = t.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = g(*xs).item()
                flat[i] = orig - eps
                lo = g(*xs).item()
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * eps)
            numeric.append(num)
    errors = [_relative(a, n, floor) for a, n in zip(analytic, numeric)]
    return GradCheckReport(analytic, numeric, errors, tol)
