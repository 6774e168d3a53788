from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class SGD:
    """SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError(f"missing gradient for parameter {p.name or p!r}")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params, lr: float, momentum: float = 0.0, state: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional form of :class:`SGD`; returns the velocity buffers to pass next time."""
    params = list(params)
    opt = SGD(params, lr, momentum)
    if state is not None:
        opt.velocity = state
    opt.step()
    return opt.velocity
