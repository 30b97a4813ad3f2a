"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors wrap numpy arrays and are immutable after construction except for
their gradient buffer. Operations (see :mod:`camp.tensorcore.ops`) record
nodes onto the active :class:`ComputationTape`; :func:`backward` replays the
tape in reverse and accumulates gradients additively, so a tensor consumed by
several branches receives the sum of all branch gradients.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    """Base error for tensor and tape misuse."""


class NonFiniteError(TensorError):
    """Raised when a NaN or Inf crosses an op boundary."""


class TapeError(TensorError):
    """Raised when backward is invoked on an invalid loss/tape pair."""


_next_tid = itertools.count().__next__


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaf tensors (parameters) whose gradients the
    caller wants populated. Internally every tensor also carries a private
    ``_needs_grad`` flag so gradients flow through intermediate results that
    sit between the loss and any parameter.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid", "_needs_grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False, *, _own: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _own:
            arr = arr.copy()
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tid = _next_tid()
        self._needs_grad = self.requires_grad
        self._op_output = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise TensorError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values: np.ndarray) -> None:
        """Replace the stored array (optimizer use only; shape-preserving)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise TensorError(
                f"assign shape {arr.shape} does not match tensor shape {self.shape}"
            )
        if not np.isfinite(arr).all():
            raise NonFiniteError("assign would store non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; the real work lives in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class TapeNode:
    """One recorded op: inputs, output, and the vector-Jacobian closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "input_tids", "output_tid")

    def __init__(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.input_tids = tuple(t.tid for t in inputs)
        self.output_tid = output.tid


_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "stack"):
        _tape_stack.stack = []
    return _tape_stack.stack


def active_tape() -> Optional["ComputationTape"]:
    stack = _stack()
    return stack[-1] if stack else None


class ComputationTape:
    """Ordered record of ops for one forward pass (one per thread at a time)."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "ComputationTape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))
        self._produced.add(output.tid)

    def produced(self, t: Tensor) -> bool:
        return t.tid in self._produced


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Accumulate d(loss)/d(tensor) into every tensor that needs a gradient.

    Walks the tape once in reverse. Calling backward twice on the same tape
    without clearing gradients doubles them (accumulation semantics).
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced by ops recorded on this tape")

    # Local adjoint buffers: tensor id -> accumulated output gradient.
    adjoint: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_grad = adjoint.pop(node.output_tid, None)
        if out_grad is None:
            continue
        if node.output.requires_grad:
            node.output.accumulate_grad(out_grad)
        grads = node.backward_fn(out_grad)
        if len(grads) != len(node.inputs):
            raise TapeError(f"op {node.op} returned {len(grads)} input grads")
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp._needs_grad:
                continue
            if tape.produced(inp):
                prev = adjoint.get(inp.tid)
                adjoint[inp.tid] = g if prev is None else prev + g
            elif inp._op_output:
                raise TapeError(
                    f"op {node.op} consumed a tensor produced on a different tape"
                )
            else:
                inp.accumulate_grad(g)
