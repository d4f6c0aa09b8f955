"""Tensor value type and the reverse-mode differentiation tape.

A :class:`Tensor` is an immutable wrapper around a numpy array. Primitives in
:mod:`latent_retinex.autodiff.ops` record themselves on the innermost active
:class:`Tape` whenever at least one input is gradient-tracked; outside of a
tape nothing is recorded, which makes plain inference cheap.

Typical use::

    with Tape() as tape:
        loss = ops.mean(ops.conv2d(x, w, b))
    grads = tape.backward(loss)      # {node_id: Tensor}
    dw = grads[w.node_id]
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, TapeStateError

_node_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` must not be modified in place once the tensor exists; every
    primitive returns a fresh tensor.
    """

    __slots__ = ("data", "requires_grad", "node_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = f", node_id={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, exponent):
        return _ops().pow(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().index(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from . import ops

    return ops


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out_id: int, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Records are appended in execution order, so inputs always precede the
    nodes that consume them. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._produced = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeStateError("cannot re-enter a tape that has already been consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            stack.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeStateError("tape already consumed by a backward pass")
        self._records.append(_Record(out.node_id, inputs, backward))
        self._produced.add(out.node_id)

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Gradients of scalar ``loss`` with respect to every tracked leaf.

        Leaves are tracked tensors consumed on this tape but not produced by
        it. Leaves without a path to ``loss`` are absent from the result.
        """
        if self._consumed:
            raise TapeStateError("backward already ran on this tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        if not loss.requires_grad or loss.node_id not in self._produced:
            raise ContractError("loss is not gradient-tracked on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                nid = inp.node_id
                if nid not in self._produced:
                    leaves[nid] = inp
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig

        self._records.clear()
        self._consumed = True
        return {nid: Tensor(grads[nid]) for nid in leaves if nid in grads}

    def gradient(self, loss: Tensor, sources: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        """Like :meth:`backward` but keyed by name; unreached sources get zeros."""
        raw = self.backward(loss)
        out = {}
        for name, src in sources.items():
            g = raw.get(src.node_id) if src.requires_grad else None
            out[name] = np.zeros_like(src.data) if g is None else g.data
        return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[int, Tensor]:
    """Run the backward pass of ``loss`` on ``tape`` (default: the active tape)."""
    tape = tape or active_tape()
    if tape is None:
        raise TapeStateError("no active tape")
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tracked(inputs: Iterable[Tensor]) -> bool:
    return any(t.requires_grad for t in inputs)
