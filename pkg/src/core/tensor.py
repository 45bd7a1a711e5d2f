"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a numpy array. Every primitive below computes its output
eagerly and, when an input requires gradients, records a `Node` holding
the parents and a vector-Jacobian callback. `backward()` collects the
nodes reachable from a scalar loss into a `Tape` and replays it in exact
reverse recording order.
"""

import itertools
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.exceptions import DegenerateInputError, NonFiniteError, ShapeError
from src.utils.config import settings

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = {
    "dtype": np.dtype(settings.default_dtype),
    "grad_enabled": True,
    "check_finite": settings.check_finite,
}
_sequence = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; outputs are constants."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "parents", "vjp", "seq")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_sequence)


class Tensor:
    """Dense real tensor, optionally tracked for differentiation."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    """Wrap plain scalars/arrays, borrowing the dtype of the tensor operand."""
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    dtype = like.dtype if like is not None else None
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=dtype)
    return a, b


def _make(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _align(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Lift per-(n,c) or per-channel operands so they broadcast over H x W."""

    def lift(x: Tensor, other: Tensor) -> Tensor:
        if other.ndim == 4 and x.ndim == 2 and x.shape == other.shape[:2]:
            return reshape(x, x.shape + (1, 1))
        if other.ndim == 4 and x.ndim == 1 and x.shape[0] == other.shape[1]:
            return reshape(x, (1, x.shape[0], 1, 1))
        return x

    a, b = lift(a, b), lift(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# Elementwise primitives

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    a, b = _align(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    a, b = _align(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    a, b = _align(a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    a, b = _align(a, b)
    if np.any(b.data == 0):
        raise DegenerateInputError("Division by zero")

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make("div", a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DegenerateInputError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        return (0.5 * g / out,)

    return _make("sqrt", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def maximum(a: Tensor, scalar: float) -> Tensor:
    """Elementwise max against a constant."""
    keep = a.data > scalar
    out = np.where(keep, a.data, np.asarray(scalar, dtype=a.dtype))
    return _make("maximum", out, (a,), lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make("relu", a.data * keep, (a,), lambda g: (g * keep,))


_ELEMENTWISE: Dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sqrt": lambda a, b=None: sqrt(a),
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
    "max-with-scalar": lambda a, b: maximum(a, float(b)),
}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """
    Dispatch an elementwise primitive by name.

    Args:
        op_kind: One of add, sub, mul, div, sqrt, exp, log, max-with-scalar
        a: Left operand
        b: Right operand (tensor or scalar); ignored by unary kinds

    Returns:
        Result tensor
    """
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"Unknown elementwise op: {op_kind}")
    return _ELEMENTWISE[op_kind](a, b)


# Shape and reduction primitives

def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"Cannot reshape {original} to {shape}")
    return _make("reshape", out, (a,), lambda g: (g.reshape(original),))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DegenerateInputError("mean over an empty tensor")
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def masked_mean(f: Tensor, mask: Optional[np.ndarray], axes: Tuple[int, ...]) -> Tensor:
    """
    Mean of `f` over `axes`, counting only entries where `mask` is true.

    Args:
        f: Input tensor
        mask: Boolean array broadcastable to f.shape, or None for all entries
        axes: Axes to reduce

    Returns:
        Tensor with `axes` removed
    """
    axes = _normalize_axes(axes, f.ndim)
    if mask is None:
        count = float(np.prod([f.shape[ax] for ax in axes]))
        if count == 0:
            raise DegenerateInputError("Empty region")
        weights = None
        out = f.data.sum(axis=axes) / count
        counts = np.asarray(count, dtype=f.dtype)
    else:
        weights = np.broadcast_to(np.asarray(mask, dtype=f.dtype), f.shape)
        counts = weights.sum(axis=axes)
        if np.any(counts == 0):
            raise DegenerateInputError("Empty region")
        out = (f.data * weights).sum(axis=axes) / counts

    def vjp(g):
        grad = np.expand_dims(g / counts, axes)
        grad = np.broadcast_to(grad, f.shape)
        return (grad * weights if weights is not None else grad.copy(),)

    return _make("masked_mean", out.astype(f.dtype, copy=False), (f,), vjp)


def _lift_stat(stat: Tensor, axes: Tuple[int, ...]) -> Tensor:
    kept = [ax for ax in range(4) if ax not in axes]
    shape = tuple(stat.shape[kept.index(ax)] if ax in kept else 1 for ax in range(4))
    return reshape(stat, shape)


def moments(f: Tensor, axes: Tuple[int, ...], mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Population mean and variance over `axes` (optionally masked)."""
    mean = masked_mean(f, mask, axes)
    centered = sub(f, _lift_stat(mean, _normalize_axes(axes, f.ndim)))
    var = masked_mean(square(centered), mask, axes)
    return mean, var


def reduce_mean_var(f: Tensor, region: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """
    Per-(n, c) population mean and variance over a spatial region.

    Args:
        f: N x C x H x W tensor
        region: Boolean H x W (shared by every plane) or N x C x H x W mask;
            None means the full plane

    Returns:
        (mean, var), each N x C
    """
    if f.ndim != 4:
        raise ShapeError(f"Expected a rank-4 tensor, got shape {f.shape}")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape not in (f.shape[2:], f.shape):
            raise ShapeError(f"Region of shape {region.shape} does not fit {f.shape}")
    return moments(f, (2, 3), region)


# Network primitives

def conv2d(f: Tensor, k: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """
    2-D cross-correlation without bias.

    Args:
        f: N x C_in x H x W input
        k: C_out x C_in x kh x kw weights
        stride: 1 or 2
        pad: 0 or 1 (zero padding on every side)

    Returns:
        N x C_out x H_out x W_out output
    """
    if stride not in (1, 2) or pad not in (0, 1):
        raise ShapeError(f"Unsupported stride/pad: {stride}/{pad}")
    if f.ndim != 4 or k.ndim != 4 or f.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {f.shape}, kernel {k.shape}")
    n, _, h, w = f.shape
    _, _, kh, kw = k.shape
    xp = np.pad(f.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else f.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output collapses for input {f.shape}")

    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, k.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        grad_k = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_cols = np.tensordot(g, k.data, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    grad_cols[..., i, j].transpose(0, 3, 1, 2)
                )
        grad_f = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
        return grad_f, grad_k

    return _make("conv2d", out, (f, k), vjp)


def avgpool2(f: Tensor) -> Tensor:
    """2 x 2 average pooling with stride 2."""
    n, c, h, w = f.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {f.shape}")
    out = f.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make("avgpool2", out, (f,), vjp)


def global_avgpool(f: Tensor) -> Tensor:
    """N x C x H x W -> N x C spatial mean."""
    if f.ndim != 4:
        raise ShapeError(f"Expected a rank-4 tensor, got shape {f.shape}")
    return reduce_mean(f, (2, 3))


def linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """x (N x D) @ w (D x K) + bias (K)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    out = x.data @ w.data + bias.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make("linear", out, (x, w, bias), vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Max-shifted log-softmax along axis 1."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def take_labels(x: Tensor, labels: np.ndarray) -> Tensor:
    """Gather x[i, labels[i]] for every row."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, labels]

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, labels), g)
        return (grad,)

    return _make("take_labels", out, (x,), vjp)


# Reverse pass

class Tape:
    """Recorded primitive applications reachable from one output, in recording order."""

    def __init__(self, outputs: List[Tensor]):
        self.outputs = sorted(outputs, key=lambda t: t.node.seq)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen = set()
        found: List[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(p for p in t.node.parents if p.requires_grad)
        return cls(found)

    def __len__(self) -> int:
        return len(self.outputs)

    def ops(self) -> List[str]:
        return [t.node.op for t in self.outputs]

    def run_backward(self, output: Tensor, seed_grad: np.ndarray):
        pending: Dict[int, np.ndarray] = {id(output): seed_grad}
        for t in reversed(self.outputs):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t.node.vjp(g)
            for parent, pg in zip(t.node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                if parent.node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into every requires_grad leaf's `.grad`.

    Raises:
        ShapeError: If loss is not a scalar
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_output(loss).run_backward(loss, seed)


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function w.r.t. `x`.

    Args:
        fn: Closure recomputing the scalar loss from the current x.data
        x: Tensor perturbed in place, restored afterwards
        h: Step size

    Returns:
        Array shaped like x
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    with no_grad():
        for index in np.ndindex(*x.shape):
            original = x.data[index]
            x.data[index] = original + h
            plus = fn().item()
            x.data[index] = original - h
            minus = fn().item()
            x.data[index] = original
            grad[index] = (plus - minus) / (2.0 * h)
    return grad
