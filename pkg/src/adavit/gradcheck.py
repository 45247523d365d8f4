"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    n_checks: int

    def passed(self, tol: float) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < tol)


def _scalarize(out: Tensor, proj: np.ndarray | None) -> float:
    if proj is None:
        return float(out.data.sum())
    return float((out.data * proj).sum())


def _rel(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < 1e-12:
        return 0.0
    return abs(a - n) / denom


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    name: str = "fn",
    h: float = 1e-5,
    n_dirs: int = 6,
    elementwise_limit: int = 0,
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic directional derivatives against central differences.

    A non-scalar output is reduced with a fixed random projection. For each
    input requiring grad, ``n_dirs`` random directions are probed, plus every
    coordinate when the input has at most ``elementwise_limit`` entries.
    Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = None if out.size == 1 else rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    seed_grad = np.ones_like(out.data) if proj is None else proj.astype(out.dtype)
    out.backward(seed_grad)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    count = 0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        g = analytic[idx] if analytic[idx] is not None else np.zeros_like(t.data)
        base = t.data.copy()
        dirs = [rng.standard_normal(t.shape) for _ in range(n_dirs)]
        if 0 < t.size <= elementwise_limit:
            for j in range(t.size):
                e = np.zeros(t.size)
                e[j] = 1.0
                dirs.append(e.reshape(t.shape))
        for v in dirs:
            t.data = base + h * v
            fp = _scalarize(fn(*inputs), proj)
            t.data = base - h * v
            fm = _scalarize(fn(*inputs), proj)
            t.data = base
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, _rel(float((g * v).sum()), numeric))
            count += 1
    for t in inputs:
        t.grad = None
    return GradcheckResult(name, worst, count)
