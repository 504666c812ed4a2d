"""Adam over named parameter blocks with a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


@dataclass
class AdamConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 3.0
    decay_every: int = 20
    block_lr: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.decay_factor >= 1:
            raise ValueError("decay factor must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay interval must be >= 1")

    def rate(self, step: int) -> float:
        """Learning rate at 0-based ``step``: divided by ``decay_factor`` every ``decay_every`` steps."""
        return self.lr / self.decay_factor ** (step // self.decay_every)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: AdamConfig):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step + 1
    lr = config.rate(state.step)
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name] = p
            if name in state.m:
                new_m[name], new_v[name] = state.m[name], state.v[name]
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        step = lr * config.block_lr.get(name, 1.0) * mhat / (np.sqrt(vhat) + config.eps)
        new_p[name] = p - step
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)
