"""Adam with bias correction and a linear learning-rate warmup."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import Parameter


class Adam:
    """Standard Adam; lr ramps linearly over the first `warmup_steps` steps.

    Moment buffers live in the parameter dtype. A parameter with no gradient
    on a step is left untouched (its moments do not decay either), which keeps
    partially-used modules honest.
    """

    def __init__(self, params: list[Parameter], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, warmup_steps: int = 0):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0 or warmup_steps < 0:
            raise ConfigError(f"bad optimizer settings: lr={lr}, betas=({beta1}, {beta2}), eps={eps}, warmup={warmup_steps}")
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ConfigError("duplicate parameter passed to optimizer")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        t = self.step_count
        if self.warmup_steps and t < self.warmup_steps:
            return self.lr * (t + 1) / self.warmup_steps
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr_t = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise TrainingError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr_t / c1) * m / (np.sqrt(v / c2) + self.eps)

    # -- checkpointing --

    def state_arrays(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.step_count, self.m, self.v

    def load_state(self, step_count: int, m: list[np.ndarray], v: list[np.ndarray]) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ConfigError(f"optimizer state holds {len(m)} moment pairs for {len(self.params)} parameters")
        for p, mi, vi in zip(self.params, m, v):
            if mi.shape != p.data.shape or vi.shape != p.data.shape:
                raise ConfigError(f"{p.name}: moment shapes {mi.shape}/{vi.shape} != {p.data.shape}")
        self.step_count = step_count
        self.m = [np.ascontiguousarray(a, dtype=p.data.dtype) for a, p in zip(m, self.params)]
        self.v = [np.ascontiguousarray(a, dtype=p.data.dtype) for a, p in zip(v, self.params)]
