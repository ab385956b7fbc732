"""Finite-difference verification of reverse-mode gradients (f64 only)."""

import numpy as np

from seqdistill.errors import DeterminismError
from seqdistill.numcore.tensor import Param, Tape, using_dtype


def grad_check(builder, point, h=1e-5):
    """Compare analytic gradients against central finite differences.

    ``builder`` maps {name: Param} to a scalar loss tensor and must be
    deterministic; ``point`` maps names to f64 arrays. Returns the maximum
    over all coordinates of |analytic - central| / max(1, |central|).
    """
    with using_dtype("f64"):
        params = {
            name: Param(np.asarray(value, dtype=np.float64), name=name)
            for name, value in point.items()
        }

        with Tape() as tape:
            loss = builder(params)
        if builder(params).item() != loss.item():
            raise DeterminismError("builder produced different losses on replay")
        tape.backward(loss)

        worst = 0.0
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            aflat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = builder(params).item()
                flat[i] = orig - h
                f_minus = builder(params).item()
                flat[i] = orig
                central = (f_plus - f_minus) / (2.0 * h)
                err = abs(aflat[i] - central) / max(1.0, abs(central))
                if err > worst:
                    worst = err
    return worst


def grad_check_model(loss_fn, params, h=1e-5):
    """Like `grad_check`, but verifies gradients of existing (f64) Params.

    ``loss_fn()`` rebuilds the loss from current parameter values; ``params``
    are perturbed in place and restored. Returns the max relative error.
    """
    with Tape() as tape:
        loss = loss_fn()
    if loss_fn().item() != loss.item():
        raise DeterminismError("loss_fn produced different losses on replay")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    for p in params:
        p.grad = None
    return worst
