"""Tensor value type and the recording tape used for reverse-mode autodiff.

Activations are rank-4 NCHW arrays. Kernels preserve the dtype of their
inputs: the engine runs in float32, while the gradient-check harness feeds
float64 values through the very same kernels.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Shape, channel or group divisibility violation."""


class NumericError(ArithmeticError):
    """A kernel produced NaN or Inf, or training diverged."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar backward, double consumption, ...)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("dgs_tape", default=None)
_mac_counter: contextvars.ContextVar["list[int] | None"] = contextvars.ContextVar("dgs_macs", default=None)


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager around a forward pass, then call
    :meth:`backward` once on the scalar result::

        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(output)/d(.) to every recorded leaf that requires grad.

        Leaf gradients are also stored in ``leaf.grad``. Returns a mapping
        from leaf tensor to its gradient array.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if output.data.size != 1:
            raise TapeError(f"backward() needs a scalar output, got shape {output.shape}")
        if not output.requires_grad:
            raise TapeError("output does not depend on any tensor that requires grad")
        self.consumed = True

        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        result = {}
        for key, t in leaves.items():
            t.grad = grads[key]
            result[t] = t.grad
        self.nodes = []
        return result


def active_tape() -> Tape | None:
    return _active_tape.get()


def record_op(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str, check_finite: bool = True) -> Tensor:
    """Wrap a kernel result, check it is finite and record it on the tape."""
    if check_finite and not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def add_macs(n: int) -> None:
    counter = _mac_counter.get()
    if counter is not None:
        counter[0] += int(n)


class count_macs_scope:
    """Context manager accumulating multiply-accumulates of conv/matmul kernels."""

    def __enter__(self) -> list[int]:
        self.counter = [0]
        self._token = _mac_counter.set(self.counter)
        return self.counter

    def __exit__(self, *exc) -> None:
        _mac_counter.reset(self._token)
