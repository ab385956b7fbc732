"""Adam optimizer with per-parameter moment state and freeze awareness."""

from dataclasses import dataclass, field

import numpy as np

from seqdistill import kernels
from seqdistill.errors import ContractViolation


@dataclass
class AdamState:
    """Bias-corrected Adam; moments are allocated lazily per parameter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: dict = field(default_factory=dict)

    def slot(self, param):
        entry = self.slots.get(param.name)
        if entry is None:
            entry = (
                np.zeros_like(param.data, dtype=np.float64).reshape(-1),
                np.zeros_like(param.data, dtype=np.float64).reshape(-1),
            )
            self.slots[param.name] = entry
        return entry


def adam_step(params, state):
    """Apply one Adam update to every non-frozen param with a gradient.

    Frozen parameters are left bit-identical; the step counter advances by
    exactly one.
    """
    state.t += 1
    for p in params:
        if getattr(p, "frozen", False):
            continue
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {p.grad.shape} does not match parameter "
                f"{p.name!r} shape {p.data.shape}"
            )
        m, v = state.slot(p)
        value = p.data.reshape(-1)
        grad = np.ascontiguousarray(p.grad.reshape(-1), dtype=value.dtype)
        kernels.adam_update(
            value, grad, m, v, state.t,
            state.lr, state.beta1, state.beta2, state.eps,
        )
    return state
