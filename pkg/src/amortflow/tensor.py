"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded whenever at
least one operand participates in the tape (a watched tensor, a tensor with
``requires_grad=True``, or the output of an earlier recorded operation).
Everything else is plain numpy arithmetic, so inference code pays no
bookkeeping cost.

Network math runs in float32; reductions accumulate in float64 and are cast
back to the operand dtype.

Example
-------
>>> x = Tensor([1.0, 2.0, 3.0])
>>> [g] = grad(lambda v: (v * v).sum(), [x])
>>> g.data.tolist()
[2.0, 4.0, 6.0]
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)
_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
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
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager. ``gradient`` may be called any number of times;
    it never mutates the record, so repeated replays are bit-identical.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._live: set[int] = set()
        self._watched: list[Tensor] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.append(t)
            self._live.add(id(t))

    def participates(self, t: Tensor) -> bool:
        return id(t) in self._live or t.requires_grad

    def record(self, op: str, inputs: tuple, output: Tensor, vjp: Callable) -> None:
        self.nodes.append(Node(op, inputs, output, vjp))
        self._live.add(id(output))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Reverse-mode gradients of a scalar ``target`` w.r.t. ``sources``.

        Sources that never influenced the target get zero gradients.
        """
        if target.size != 1:
            raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.participates(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(Tensor(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False)))
        return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _emit(op: str, inputs: tuple, data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in _FLOAT_TYPES else DEFAULT_DTYPE)
    tape = active_tape()
    if tape is not None and any(tape.participates(t) for t in inputs):
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor, tuple]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    return a, b, shape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # adjoint at exactly 0 is 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(x.data.dtype.type(0), x.data)
    return _emit("softplus", (x,), out, lambda g: (g * (0.5 * (1 + np.tanh(0.5 * x.data))),))


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2 * g * x.data,))


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "relu": relu, "softplus": softplus,
          "neg": neg, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](as_tensor(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _emit("matmul", (a, b), _rowwise_matmul(a.data, b.data),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS takes a different kernel for a single row, which changes the
    # rounding; doubling the row keeps each row's result independent of batch size
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


# --------------------------------------------------------------- reductions


def _check_axis(x: Tensor, axis):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")
    return tuple(ax % x.ndim for ax in axes)


def reduce(op: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean along ``axis`` (all axes if None), accumulated in float64."""
    axes = _check_axis(x, axis)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if op == "mean" and count == 0:
        raise DomainError("mean over an empty axis")
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    total = np.sum(x.data, axis=axes, dtype=np.float64, keepdims=keepdims)
    scale = 1.0 if op == "sum" else 1.0 / count
    out = np.asarray(total * scale, dtype=x.dtype)

    def vjp(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * x.dtype.type(scale), x.shape).copy(),)

    return _emit(op, (x,), out, vjp)


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the adjoint flows to the first maximiser."""
    (ax,) = _check_axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _emit("max", (x,), np.squeeze(out, axis=ax), vjp)


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with max-subtraction for stability."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x - Tensor(m)
    return log(exp(shifted).sum(axis=axis)) + Tensor(np.squeeze(m, axis=axis))


# ------------------------------------------------------------ shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(x: Tensor, key) -> Tensor:
    """numpy-style indexing; the adjoint scatters back with accumulation."""
    out = np.asarray(x.data[key])

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit("index", (x,), out, vjp)


def take(x: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _emit("take", (x,), out, vjp)


# ------------------------------------------------------------- differentiation


def grad(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of the scalar program ``f(*inputs)`` w.r.t. each input."""
    inputs = list(inputs)
    with Tape() as tape:
        tape.watch(*inputs)
        out = f(*inputs)
    if not isinstance(out, Tensor):
        out = as_tensor(out)
    return tape.gradient(out, inputs)


def finite_difference_check(f: Callable[..., Tensor], x, h: float = 1e-3, dtype=np.float64) -> float:
    """Largest relative deviation between tape and central-difference gradients.

    ``x`` is a Tensor or a list of Tensors; ``f(*x)`` must return a scalar.
    Both routes are evaluated with the tensors temporarily promoted to
    ``dtype`` (float64 by default) so that float32 rounding does not swamp a
    step of size ``h``. Original data is restored on exit.
    Points sitting exactly on a relu kink are not differentiable and may
    report large errors.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.data for t in xs]
    try:
        for t in xs:
            t.data = t.data.astype(dtype)
        ad = [g.data.astype(np.float64) for g in grad(f, xs)]
        worst = 0.0
        for t, g_ad in zip(xs, ad):
            flat = t.data.reshape(-1)
            g_fd = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(np.asarray(f(*xs).data, dtype=np.float64).reshape(-1)[0])
                flat[i] = orig - h
                fm = float(np.asarray(f(*xs).data, dtype=np.float64).reshape(-1)[0])
                flat[i] = orig
                g_fd[i] = (fp - fm) / (2 * h)
            err = np.abs(g_ad.reshape(-1) - g_fd) / (np.abs(g_fd) + 1e-8)
            if err.size:
                worst = np.maximum(worst, float(err.max()))
        return float(worst)
    finally:
        for t, d in zip(xs, saved):
            t.data = d
