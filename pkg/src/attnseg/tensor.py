"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations are :class:`Function` subclasses. Calling ``SomeOp.apply`` runs the
forward on raw numpy arrays and, when a :class:`Tape` is active and any input
requires a gradient, appends a :class:`Node` to that tape. ``Tape.backward``
walks the recorded nodes in reverse, which is a valid reverse topological
order because a node can only be recorded after all of its inputs exist.
"""

from __future__ import annotations

import struct
import threading
import weakref
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

DTYPE = np.float64


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class SwitchRecorder:
    """Collects the branch state of piecewise-linear ops during forward calls.

    ReLU masks and max-routing indices are appended to ``states`` while the
    recorder is active. Two forward passes whose states compare equal lie on
    the same linear piece, which finite-difference checks rely on.
    """

    def __init__(self):
        self.states: list[np.ndarray] = []

    def __enter__(self):
        _state.switches = self
        return self

    def __exit__(self, *exc):
        _state.switches = None

    def same_piece(self, other: "SwitchRecorder") -> bool:
        return len(self.states) == len(other.states) and all(
            np.array_equal(a, b) for a, b in zip(self.states, other.states)
        )


def record_switch(state: np.ndarray) -> None:
    rec = getattr(_state, "switches", None)
    if rec is not None:
        rec.states.append(state.copy())


class Tensor:
    """An n-dimensional array of 64-bit reals with an optional gradient buffer."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == DTYPE else arr.astype(DTYPE)
        t.requires_grad = False
        t.grad = None
        t._node = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


class Node:
    """One recorded operation. The output is held weakly so that a tensor and
    its node never form a reference cycle."""

    __slots__ = ("fn", "inputs", "_output")

    def __init__(self, fn: "Function", inputs: tuple[Tensor, ...], output: Tensor):
        self.fn = fn
        self.inputs = inputs
        self._output = weakref.ref(output)

    @property
    def output(self) -> Tensor | None:
        return self._output()


class Tape:
    """Records operations executed while the tape is active.

    Use as a context manager; tapes nest per thread and the innermost one
    records. A tape is rebuilt for every forward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss)


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tensor that ``loss`` depends on.

    Gradients accumulate additively into existing buffers; zero them between
    optimisation steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ContractError("loss was not produced on an active tape")
    tape = node.fn.tape
    try:
        stop = next(i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i] is node)
    except StopIteration:
        raise ContractError("loss node is not on its tape (already backpropagated?)") from None

    # intermediate buffers are private to this traversal; leaves accumulate
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes[: stop + 1]):
        out = n.output
        if out is None:  # nothing references the result, so nothing needs its gradient
            continue
        # consumed nodes are detached so the graph is freed with the tape entries;
        # the loss keeps its node so a repeated backward is still rejected
        if out is not loss:
            out._node = None
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        out.grad = g_out
        in_grads = n.fn.backward(g_out)
        if not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for t, g in zip(n.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate(t, g)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
    del tape.nodes[: stop + 1]


class Function:
    """Base class of differentiable operations.

    Subclasses implement ``forward(*arrays, **kw)`` returning an ndarray and
    ``backward(grad)`` returning one gradient (or ``None``) per input.
    """

    tape: Tape | None = None

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = Tensor._wrap(fn.forward(*(t.data for t in tensors), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            fn.tape = tape
            out.requires_grad = True
            node = Node(fn, tensors, out)
            out._node = node
            tape.record(node)
        return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(tuple(a), tuple(b))
    except ValueError:
        raise DimensionError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible") from None


# --------------------------------------------------------------------- arithmetic


class Add(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ g


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) extents must agree exactly."""
    return MatMul.apply(a, b)


# --------------------------------------------------------------- nonlinearities


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so neither branch overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.y = out
        return out

    def backward(self, g):
        return g * self.y * (1.0 - self.y)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        record_switch(self.mask)
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return g * self.mask


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return y * (g - (g * y).sum(axis=self.axis, keepdims=True))


class Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, g):
        return g * self.y


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    return ReLU.apply(a)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by the row maximum."""
    return Softmax.apply(a, axis=-1)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return np.broadcast_to(g, self.shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return np.broadcast_to(g / self.count, self.shape).copy()


class Max(Function):
    """Maximum over axes; the gradient goes to the first maximal entry."""

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        axes = _norm_axes(axis, a.ndim)
        self.axes, self.keepdims = axes, keepdims
        keep = tuple(i for i in range(a.ndim) if i not in axes)
        moved = np.transpose(a, keep + axes)
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        self.arg = flat.argmax(axis=-1)
        record_switch(self.arg)
        self.perm = keep + axes
        self.moved_shape = moved.shape
        out = np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)
        return out

    def backward(self, g):
        if self.keepdims:
            g = np.squeeze(g, axis=self.axes)
        flat = np.zeros(self.arg.shape + (int(np.prod(self.moved_shape[self.arg.ndim :])),), dtype=DTYPE)
        np.put_along_axis(flat, self.arg[..., None], g[..., None], axis=-1)
        moved = flat.reshape(self.moved_shape)
        return np.transpose(moved, np.argsort(self.perm))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    return Max.apply(a, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- shape ops


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes))


class Concat(Function):
    def forward(self, *arrays, axis=1):
        ref = arrays[0]
        ax = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise DimensionError(
                    "concat: extents disagree outside axis %d: %s"
                    % (ax, ", ".join(str(x.shape) for x in arrays))
                )
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def transpose2d(a) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return Transpose.apply(a, axes=tuple(axes))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence) -> Tensor:
    """Concatenate along the channel axis (axis 1 of N×C×H×W, axis 0 of C×H×W)."""
    axis = 0 if as_tensor(tensors[0]).ndim == 3 else 1
    return Concat.apply(*tensors, axis=axis)


# -------------------------------------------------------------- serialization

MAGIC = b"ATNS"
VERSION = 1


def write_tensor(fh: BinaryIO, t) -> int:
    """Write one ATNS record and return the number of bytes written."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"not an ATNS tensor record (magic {magic!r})")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise FormatError(f"unsupported ATNS version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise FormatError("truncated ATNS tensor record")
    return Tensor(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
