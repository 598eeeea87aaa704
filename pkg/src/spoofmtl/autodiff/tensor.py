"""Tensor, tape and reverse-mode backward pass.

Operations record themselves onto the active :class:`Tape` whenever grad
mode is enabled and at least one input requires a gradient.  ``backward``
walks the tape in reverse recording order, visiting each reachable node
exactly once and summing gradients that reach a node from several
consumers.

Setting ``SPOOFMTL_DEBUG=1`` makes every op check that finite inputs gave
a finite output and raise ``FloatingPointError`` otherwise.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEBUG_CHECKS = os.environ.get("SPOOFMTL_DEBUG", "") not in ("", "0")

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("index", "parents", "backward_fn", "out")

    def __init__(self, index: int, parents: tuple, backward_fn: BackwardFn, out: "Tensor"):
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.out = out


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's parents precede
    it and reverse iteration is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, out: "Tensor", parents: tuple, backward_fn: BackwardFn) -> Node:
        node = Node(len(self.nodes), parents, backward_fn, out)
        self.nodes.append(node)
        out.tape_node = node
        return node

    def clear(self) -> None:
        for node in self.nodes:
            node.out.tape_node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float array with an optional link into the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape_node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; implementations live in ops
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)


class Parameter(Tensor):
    """Leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and record it when any parent needs grad."""
    out = Tensor(data)
    if DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output {out.shape} from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tape.record(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is cleared afterwards, so each forward pass supports exactly
    one backward pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_node is None:
        if loss.requires_grad:
            # loss is itself a leaf
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise ValueError("loss is not on the active tape (no input requires grad)")

    tape = _tape
    start = loss.tape_node.index
    if start >= len(tape.nodes) or tape.nodes[start] is not loss.tape_node:
        raise ValueError("loss was recorded on a tape that is no longer active")

    pending: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
    for i in range(start, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise RuntimeError(
                    f"gradient shape {pg.shape} does not match tensor shape {parent.data.shape}"
                )
            pnode = parent.tape_node
            if pnode is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif pnode.index in pending:
                pending[pnode.index] = pending[pnode.index] + pg
            else:
                pending[pnode.index] = pg
    tape.clear()


def reset_tape() -> None:
    """Drop any recorded graph, e.g. after an inference pass with grad enabled."""
    _tape.clear()
