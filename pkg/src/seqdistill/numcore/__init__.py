"""Reverse-mode differentiation engine: tensors, tape, primitives, Adam."""

from seqdistill.numcore import ops
from seqdistill.numcore.gradcheck import grad_check, grad_check_model
from seqdistill.numcore.init import Rng, seeded_init
from seqdistill.numcore.optim import AdamState, adam_step
from seqdistill.numcore.tensor import (
    Param,
    Tape,
    Tensor,
    default_dtype,
    finite_checks,
    forward_backward,
    set_default_dtype,
    using_dtype,
)

__all__ = [
    "AdamState",
    "Param",
    "Rng",
    "Tape",
    "Tensor",
    "adam_step",
    "default_dtype",
    "finite_checks",
    "forward_backward",
    "grad_check",
    "grad_check_model",
    "ops",
    "seeded_init",
    "set_default_dtype",
    "using_dtype",
]
