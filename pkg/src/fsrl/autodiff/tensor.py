"""Reverse-mode autodiff over numpy arrays.

Every differentiable primitive appends a node to the calling thread's tape.
``backward`` walks that tape in exact reverse execution order, then closes it;
a closed tape refuses both further recording and a second backward until
``reset_tape`` installs a fresh one. Leaf gradients accumulate across tapes
(gradient accumulation) and are cleared by the optimizer.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double backward, detached loss, ...)."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    closed: bool = False

    def record(self, node: Node) -> None:
        if self.closed:
            raise TapeError("tape already consumed by backward(); call reset_tape() before the next forward pass")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    """The live tape; a tape already consumed by backward() is replaced by a fresh one."""
    tape = getattr(_local, "tape", None)
    if tape is None or tape.closed:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> Tape:
    _local.tape = Tape()
    return _local.tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording; outputs never require grad."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._tape: Tape | None = None
        self.name = name

    # -- structure -----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` and record it if needed."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn)
        tape.record(node)
        out._node = node
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on.

    Raises TapeError for a non-scalar or detached loss, or when the tape that
    produced ``loss`` has already been consumed.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward() on a detached tensor (no requires_grad ancestors)")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss._tape
    if tape is None or tape.closed:
        raise TapeError("backward() called twice on the same tape; call reset_tape() first")
    if tape is not current_tape():
        raise TapeError("loss was produced on a tape that is no longer live")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    reached: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad:
                continue
            reached[id(inp)] = inp
            if gi is None:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for t in reached.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.closed = True
    tape.nodes.clear()
