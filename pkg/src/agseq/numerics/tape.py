"""Reverse-mode tape over float64 numpy arrays.

A Tape is an ordered record of backward closures. Forward ops append one
closure each; ``backward`` replays them in exact reverse execution order.
Gradients accumulate with ``+=`` so one tape supports sums of losses, and
``zero_grad`` is an explicit, separate step.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, NumericError


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value entered the computation graph")
    return arr


class Tape:
    """Execution record for one forward pass. Run backward at most once."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list = []

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: "Var") -> None:
        if loss.value.shape != ():
            raise ConfigurationError(
                f"backward needs a scalar root, got shape {loss.value.shape}"
            )
        loss.grad += 1.0
        for fn in reversed(self._ops):
            fn()


class Var:
    """A node in the graph: a float64 array plus its gradient accumulator.

    ``tape=None`` builds a value-only node (evaluation mode); no gradient
    buffer is allocated and downstream ops skip recording.
    """

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: Tape | None, grad: np.ndarray | None = None):
        self.value = _as_f64(value)
        self.tape = tape
        if grad is not None:
            self.grad = grad
        elif tape is not None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape


class Parameter:
    """Named trainable array with gradient and Adam moment buffers."""

    __slots__ = ("name", "value", "grad", "m", "v", "step_count")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = _as_f64(value).copy()
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0

    def as_var(self, tape: Tape | None) -> Var:
        # Shares the value/grad buffers, so backward lands in this Parameter.
        return Var(self.value, tape, grad=self.grad)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"
