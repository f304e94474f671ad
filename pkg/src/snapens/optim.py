"""Outer-minimisation optimisers: plain SGD, Heavy Ball and Nesterov.

Update rules, with ``g' = g + weight_decay * theta``::

    SGD:  theta <- theta - lr * g'
    HB:   v <- mu * v + g';   theta <- theta - lr * v
    NAG:  v <- mu * v + g';   theta <- theta - lr * (g' + mu * v)

This is the velocity-accumulation convention of common deep learning
frameworks. The NAG form folds the look-ahead into the update so that the
gradient is still taken at the current parameters. The classical Polyak
form ``theta <- theta - lr * g + mu * (theta - theta_prev)`` and Nesterov's
original look-ahead gradient are equivalent reparametrisations for a
constant learning rate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .models import ParameterSet


class Family(enum.Enum):
    SGD = "SGD"
    HB = "HB"
    NAG = "NAG"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, cls):
            return value
        key = str(value).upper()
        return cls({"HEAVYBALL": "HB", "HEAVY_BALL": "HB", "NESTEROV": "NAG"}.get(key, key))


@dataclass(frozen=True)
class OptimizerConfig:
    family: Family = Family.HB
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family.parse(self.family))
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


class Optimizer:
    """Applies :class:`OptimizerConfig` updates to one live parameter set in place."""

    def __init__(self, config: OptimizerConfig, state: OptimizerState | None = None):
        self.config = config
        self.state = state or OptimizerState()

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray]) -> None:
        if not params.congruent(grads):
            raise ValueError("gradients are not congruent with the parameter set")
        cfg = self.config
        lr, mu, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
        velocity = self.state.velocity
        for name, theta in params:
            g = grads[name]
            if wd != 0:
                g = g + wd * theta
            if cfg.family is Family.SGD:
                theta -= lr * g
                continue
            v = velocity.get(name)
            if v is None:
                v = velocity[name] = np.zeros_like(theta)
            v *= mu
            v += g
            if cfg.family is Family.HB:
                theta -= lr * v
            else:
                theta -= lr * (g + mu * v)
        self.state.steps += 1


def step(config: OptimizerConfig, state: OptimizerState, params: ParameterSet, grads) -> None:
    """Functional form of :meth:`Optimizer.step`; mutates ``params`` and ``state``."""
    Optimizer(config, state).step(params, grads)
