"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when at least
one input requires a gradient; outside a tape they just compute values.
"""

from __future__ import annotations

import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericalError

_tape_ids = itertools.count(1)
_local = threading.local()

DEFAULT_DTYPE = np.float32


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus an optional gradient buffer.

    Shapes are usually ``(batch, channels, height, width)``; scalar losses
    have shape ``()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{nm}, requires_grad={self.requires_grad})"

    # arithmetic used by losses and small tests
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import scale_shift

        if isinstance(other, Tensor):
            raise TypeError("tensor-tensor products are not supported; use ops explicitly")
        return scale_shift(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # discrete choices made in the forward pass (activation masks, z-test
    # winners); finite-difference checks skip samples where these change
    decisions: bytes | None = None


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, inputs, output, backward, decisions=None) -> None:
        output.requires_grad = True
        output.tape_id = self.id
        if output.name is None:
            output.name = f"{op}#{len(self.nodes)}"
        self.nodes.append(Node(op, tuple(inputs), output, backward, decisions))

    def signature(self) -> str:
        """Digest of every discrete decision taken while recording."""
        h = hashlib.sha1()
        for n in self.nodes:
            if n.decisions is not None:
                h.update(n.op.encode())
                h.update(n.decisions)
        return h.hexdigest()

    def first_nonfinite(self) -> Node | None:
        for n in self.nodes:
            if not np.all(np.isfinite(n.output.data)):
                return n
        return None


def record(op: str, inputs, output: Tensor, backward, decisions=None) -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(op, inputs, output, backward, decisions)
    return output


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` for every tensor reachable from ``root``.

    Leaf gradients accumulate across calls; tensors on the tape that the root
    does not depend on receive zero gradients.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape_id != tape.id:
        raise ContractError("root was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.output))
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        node.output.grad = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for node in tape.nodes:
        if node.output.grad is None or id(node.output) not in grads:
            node.output.grad = np.zeros_like(node.output.data)
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def check_finite(tape: Tape, loss: Tensor) -> None:
    """Raise ``NumericalError`` naming the first non-finite tensor on the tape."""
    if np.all(np.isfinite(loss.data)):
        return
    node = tape.first_nonfinite()
    where = node.output.name if node is not None else (loss.name or "loss")
    raise NumericalError(f"non-finite value first produced by {where}")
