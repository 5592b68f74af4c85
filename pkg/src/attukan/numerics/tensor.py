"""Dense tensor value type and the recording tape used for reverse-mode gradients.

A :class:`Tensor` is a thin wrapper over a numpy array. Operations only build
graph nodes while a :class:`GradTape` is active; outside a tape they run as
plain numpy code, which is what inference and finite-difference probes use.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np

__all__ = ["Tensor", "GradTape", "Node", "backward", "as_tensor", "current_tape", "no_tape"]

_TAPES: list["GradTape"] = []


class Tensor:
    """N-dimensional float array with an optional gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients into
    ``.grad`` during :meth:`GradTape.backward`. Tensors produced by recorded
    operations are interior nodes and never hold ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise FloatingPointError(f"tensor {self.name or '<anon>'} has {bad} non-finite elements")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the primitives live in ops.py
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    ctx: SimpleNamespace
    backward_fn: Callable[[SimpleNamespace, np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Append-only record of primitive applications.

    Nodes are appended in execution order, which is a topological order of the
    computation, so replaying the list in reverse visits every node once after
    all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def current_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever is already stored, so two calls without
    zeroing in between double the accumulated values.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        _accumulate_leaf(loss, pending.pop(id(loss)))
        return
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(node.ctx, g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"backward of {node.op} produced grad {pg.shape} for input {parent.shape}"
                )
            if parent.is_leaf:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)
