"""Dense tensors with a tape-based reverse-mode autodiff.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = F.cross_entropy(model(x), y)
    tape.backward(loss)

Outside a tape every primitive simply computes values, which is what the
evaluation paths use.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "get_default_dtype",
    "set_default_dtype",
    "forward_primitive",
    "backward",
]

_DEFAULT_DTYPE = np.float32
_local = threading.local()
_tape_ids = itertools.count(1)


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for a primitive."""

    def __init__(self, op: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the element type used when a tensor is built without one."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


class Tensor:
    """An n-dimensional array that may take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Python operators dispatch to the functional primitives.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not a primitive; multiply by a reciprocal")
        return F.mul(self, 1.0 / other)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.index(self, index)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the record is already a
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self.sweeps = 0
        self.visits = 0

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn, op: str) -> None:
        out.requires_grad = True
        out.tape_id = self.id
        self.nodes.append(_Node(out, tuple(parents), backward_fn, op))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor that ``loss`` depends on."""
        if loss.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        if loss.tape_id != self.id:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        self.sweeps += 1
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            self.visits += 1
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + pg


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Back-propagate ``loss`` through the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    tape.backward(loss)


def _record(out_data: np.ndarray, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn, op)
    return out


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_primitive("relu", x)``."""
    from . import functional as F

    fn = F.PRIMITIVES.get(op_kind)
    if fn is None:
        raise KeyError(f"unknown primitive {op_kind!r}")
    return fn(*inputs, **kwargs)


def sliding_windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Read-only view of shape (B, C, kh, kw, ho, wo) over a padded NCHW array."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
