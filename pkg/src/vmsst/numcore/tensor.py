"""Dense tensors with a define-by-run reverse-mode autodiff tape.

Values live in numpy arrays; the tape, backward rules, and gradient
propagation are implemented here. A fresh Tape is opened per training step
(`with Tape():`); operations executed outside any tape run forward-only.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_TAPE_STACK: list["Tape"] = []


class OpNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_fn", "tape", "backward_visits")

    def __init__(self, name, inputs, output, backward_fn, tape):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.backward_visits = 0


class Tape:
    """Ordered record of operations; execution order is topological."""

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list[OpNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.ops)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense n-dimensional array plus optional grad and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[OpNode] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient array; zeros when the tensor was unreachable from the loss."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py (bound at import time)
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(self, other)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(self, other)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __neg__(self):
        return _ops.mul(self, -1.0)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return _ops.reduce_mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return _ops.transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def record(
    name: str,
    inputs: tuple[Tensor, ...],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    """Create the output tensor and record the op on the active tape.

    When no tape is active, or no input requires grad, the op is not recorded
    and the output does not require grad.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = OpNode(name, inputs, out, backward_fn, tape)
        out.node = node
        tape.ops.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a recorded scalar loss.

    Accumulates dLoss/dParam into `.grad` of every reachable leaf tensor with
    requires_grad; leaves not on the tape keep grad=None (read as zero).
    Each tape node is processed at most once.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward requires a loss recorded on an active tape")
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        op.backward_visits += 1
        input_grads = op.backward_fn(g)
        for inp, gi in zip(op.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that participates in gradient computation."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        from ..errors import NumericalError

        raise NumericalError(f"non-finite values in {what}")


class _OpsProxy:
    """Late-bound handle so Tensor operators can reach ops.py without a cycle."""

    def __getattr__(self, item):
        from . import ops as ops_module

        fn = getattr(ops_module, item)
        setattr(self, item, fn)
        return fn


_ops = _OpsProxy()


def shape_guard(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)
