"""Dense tensor value and the reverse-mode tape that records operations on it.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, w))
    tape.backward(loss)

Outside a ``Tape`` block every op is evaluated eagerly without bookkeeping,
which is how inference runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeError(RuntimeError):
    pass


class TensorND:
    """An n-dimensional float64 array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "TensorND":
        # skips the defensive copy in __init__ for op outputs
        t = cls.__new__(cls)
        t.data = arr if arr.ndim > 0 else arr.reshape(1)
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        t.name = None
        return t

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "TensorND":
        return TensorND._wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"TensorND(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[TensorND, ...]
    backward_fn: BackwardFn | None
    out_shape: tuple[int, ...]


_local = threading.local()


def _stack() -> list["Tape"]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class no_grad:
    """Suspend recording, even inside an active ``Tape`` block."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the DAG. A tape can be replayed backward once.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        s = _stack()
        if s and s[-1] is self:
            s.pop()

    def record(self, op: str, out: TensorND, inputs: tuple[TensorND, ...], backward_fn: BackwardFn) -> TensorND:
        for t in inputs:
            if t.node_id is not None and t.tape is not self:
                raise TapeError(f"{op}: input recorded on a different tape")
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(Node(op, inputs, backward_fn, out.shape))
        return out

    def backward(self, loss: TensorND, params: Sequence[TensorND] | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Leaf gradients accumulate into existing ``.grad`` buffers. When
        ``params`` is given those tensors are zeroed first, so parameters the
        loss does not reach end up with an all-zero gradient.
        """
        if self.consumed:
            raise TapeError("backward() called twice on the same tape; re-run the forward pass")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if params is not None:
            for p in params:
                p.zero_grad()
        self.consumed = True
        if loss.node_id is None or loss.tape is not self:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            self.nodes.clear()
            return

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise TapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if inp.node_id is not None and inp.tape is self:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = ig if prev is None else prev + ig
                elif inp.grad is None:
                    inp.grad = np.array(ig, dtype=np.float64)
                else:
                    inp.grad = inp.grad + ig
        # drop saved forward context
        for node in self.nodes:
            node.backward_fn = None
        self.nodes.clear()


def as_tensor(x) -> TensorND:
    if isinstance(x, TensorND):
        return x
    return TensorND(x)


def make_output(op: str, arr: np.ndarray, inputs: tuple[TensorND, ...], backward_fn: BackwardFn) -> TensorND:
    """Wrap an op result, recording it when a tape is active and any input needs grad."""
    out = TensorND._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out
