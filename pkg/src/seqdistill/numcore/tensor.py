"""Dense float tensors with tape-based reverse-mode differentiation.

A ``Tape`` records every differentiable primitive executed while it is
active; ``Tape.backward`` replays the records in reverse exactly once,
accumulating gradients into every tensor that requires them. Parameters
(``Param``) add a unique name and a ``frozen`` flag; frozen parameters let
gradients flow *through* them but never accumulate a gradient of their own.

Training runs in f32 by default; verification code switches to f64 via
``using_dtype("f64")``.
"""

from contextlib import contextmanager

import numpy as np

from seqdistill.errors import ContractViolation, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {
    "dtype": np.float32,
    "tape": None,
    "finite_checks": True,
}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(name):
    if name not in _DTYPES:
        raise ContractViolation(f"unknown dtype {name!r}; expected f32 or f64")
    _state["dtype"] = _DTYPES[name]


@contextmanager
def using_dtype(name):
    """Temporarily switch the default dtype ('f32' or 'f64')."""
    prev = _state["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def finite_checks(enabled):
    prev = _state["finite_checks"]
    _state["finite_checks"] = enabled
    try:
        yield
    finally:
        _state["finite_checks"] = prev


def finite_checks_enabled():
    return _state["finite_checks"]


def active_tape():
    return _state["tape"]


class Tensor:
    """A dense float array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        kind = type(self).__name__
        return f"{kind}(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic operators are attached by seqdistill.numcore.ops


class Param(Tensor):
    """A named leaf tensor; ``frozen`` ones are invisible to the optimizer."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name, frozen=False, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen


class _Record:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op, out, backward):
        self.op = op
        self.out = out
        self.backward = backward


class Tape:
    """Ordered log of executed primitives; context manager activates it."""

    def __init__(self):
        self.records = []
        self.params = {}

    def __enter__(self):
        if _state["tape"] is not None:
            raise ContractViolation("nested tapes are not supported")
        _state["tape"] = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state["tape"] = None
        return False

    def add(self, op, out, backward, inputs):
        self.records.append(_Record(op, out, backward))
        for x in inputs:
            if isinstance(x, Param) and not x.frozen:
                self.params[x.name] = x

    def backward(self, loss):
        """Propagate d(loss)/d(everything); loss must be a scalar on this tape."""
        if loss.data.shape != ():
            raise ContractViolation(
                f"loss must be a scalar tensor, got shape {loss.data.shape}"
            )
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for tensor, grad in rec.backward(g):
                if tensor is None or not tensor.requires_grad:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NumericError(
                        f"non-finite gradient produced by primitive {rec.op!r}"
                    )
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
                else:
                    tensor.grad = tensor.grad + grad


def forward_backward(tape, loss):
    """Run backward on ``tape`` and return {param name: gradient Tensor}.

    Frozen parameters never appear in the result; every reachable non-frozen
    parameter does.
    """
    tape.backward(loss)
    grads = {}
    for name, p in tape.params.items():
        if p.grad is not None:
            grads[name] = Tensor(p.grad, dtype=p.grad.dtype)
    return grads
