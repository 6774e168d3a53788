from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _numeric(f: Callable[[], Tensor], flat: np.ndarray, i: int, eps: float, points: int) -> float:
    orig = flat[i]

    def at(step: float) -> float:
        flat[i] = orig + step
        return f().item()

    try:
        if points == 3:
            return (at(eps) - at(-eps)) / (2 * eps)
        # fourth-order stencil: truncation error O(eps^4) instead of O(eps^2)
        return (-at(2 * eps) + 8 * at(eps) - 8 * at(-eps) + at(-2 * eps)) / (12 * eps)
    finally:
        flat[i] = orig


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               n_samples: int | None = 40, seed: int = 0, points: int = 3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. Up to
    ``n_samples`` coordinates per parameter are probed (all when None).
    ``points`` selects the 3-point or 5-point central stencil. The error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for i in coords:
            numeric = _numeric(f, flat, int(i), eps, points)
            exact = a.reshape(-1)[i]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
