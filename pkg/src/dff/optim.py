"""SGD with classic momentum and coupled weight decay, plus poly LR decay."""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


class OptState:
    """Per-parameter momentum buffers plus the optimizer hyperparameters.

    Buffers start at zero and always match their parameter's shape.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
    ):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = [np.zeros_like(p.data) for p in params]


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptState,
    lr: Optional[float] = None,
) -> None:
    """In-place update: v <- m*v + (g + wd*p); p <- p - lr*v."""
    step_lr = state.lr if lr is None else lr
    if step_lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {step_lr}")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape}"
            )
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= step_lr * v


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iteration/max_iter)^power, clamped to 0 past the end."""
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    if iteration > max_iter:
        warnings.warn(
            f"poly_lr: iteration {iteration} past max_iter {max_iter}, clamping to 0",
            stacklevel=2,
        )
        return 0.0
    return base_lr * (1.0 - iteration / max_iter) ** power


class SGD:
    """Convenience wrapper pulling gradients straight off the parameters."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.state = OptState(self.params, lr, momentum, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        grads = []
        for p in self.params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        sgd_step(self.params, grads, self.state, lr=lr)
