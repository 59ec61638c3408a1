"""SGD with heavy-ball momentum over named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autograd import NonFiniteError, Tensor


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def reset(self) -> None:
        self.velocity.clear()


def sgd_step(params: Iterable[tuple[str, Tensor]], state: SgdState) -> None:
    """v <- momentum*v + grad; theta <- theta - lr*v; then clear grads.

    All gradients are validated before any parameter is touched, so a bad
    gradient leaves the whole set unchanged.
    """
    params = list(params.items() if hasattr(params, "items") else params)
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    for name, p in params:
        v = state.velocity.get(name)
        if v is None:
            v = p.grad.copy()
        else:
            v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.data -= state.learning_rate * v
        p.grad = None
