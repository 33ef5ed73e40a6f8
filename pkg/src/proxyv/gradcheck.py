"""Central-difference verification of the reverse-mode gradients.

Checks run at 64-bit only: float32 roundoff swamps the O(step^2) truncation
error of central differences, so a 32-bit check could neither confirm nor
deny a correct gradient. Callers build their model/inputs at float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max rel err {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})"
        )


def grad_check(fn, params: list[Parameter], step: float = 1e-5, floor: float = 1e-8) -> GradCheckResult:
    """Compare reverse-mode gradients of the scalar fn() against central differences.

    fn must be a deterministic closure over `params` returning a scalar Tensor.
    Relative error per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise StateError(f"grad_check requires float64 parameters; {p.name} is {p.data.dtype}")
        p.grad = None

    out = fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise StateError("grad_check: fn must return a scalar Tensor")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = GradCheckResult(-1.0, "", (), 0.0, 0.0)
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = float(fn().data)
                flat[i] = orig - step
                f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ai = float(a.reshape(-1)[i])
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
            if rel > worst.max_rel_error:
                idx = np.unravel_index(i, p.data.shape)
                worst = GradCheckResult(rel, p.name, tuple(int(j) for j in idx), ai, numeric)
    return worst
