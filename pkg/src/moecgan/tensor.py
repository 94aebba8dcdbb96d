"""Dense tensors with reverse-mode automatic differentiation.

Every primitive that touches a tensor requiring gradients records a
:class:`Node` stamped with a global sequence number. ``backward`` collects
the nodes reachable from the loss into a :class:`ComputationTape` and
replays their adjoint rules in exact reverse insertion order.

Broadcasting follows NumPy's trailing-dimension rule. Gradients flowing
into a broadcast operand are summed back down to that operand's shape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "ComputationTape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "tensor",
    "elementwise",
    "matmul",
    "softmax_temperature",
    "concat",
    "backward",
    "check_gradients",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()
_seq = itertools.count()
_default_dtype = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded primitive: its inputs, output and local adjoint rule."""

    __slots__ = ("seq", "op", "inputs", "adjoint", "consumed")

    def __init__(self, op: str, inputs: tuple, adjoint: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.adjoint = adjoint
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of primitives ------------------------------------------
    def relu(self):
        return elementwise("relu", self)

    def leaky_relu(self, slope: float = 0.2):
        return leaky_relu(self, slope)

    def gelu(self):
        return elementwise("gelu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def tanh(self):
        return elementwise("tanh", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def square(self):
        return elementwise("square", self)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    out = Tensor(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), adjoint)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise primitives ---------------------------------------------------

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY: dict[str, tuple[Callable, Callable]] = {
    # kind: (forward(x) -> y, local_grad(x, y) -> dy/dx)
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype)),
    "sigmoid": (_sigmoid, lambda x, y: y * (1 - y)),
    "tanh": (np.tanh, lambda x, y: 1 - y * y),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1 / x),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
    "square": (np.square, lambda x, y: 2 * x),
    "abs": (np.abs, lambda x, y: np.sign(x)),
    "gelu": (
        lambda x: x * 0.5 * (1 + erf(x * _SQRT1_2)),
        lambda x, y: 0.5 * (1 + erf(x * _SQRT1_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x),
    ),
}

_BINARY = ("add", "sub", "mul", "div")


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply a pointwise primitive. Binary kinds broadcast over trailing dims."""
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} is unary")
        a = _as_tensor(a)
        fwd, local = _UNARY[kind]
        x = a.data
        y = fwd(x).astype(x.dtype, copy=False)

        def adjoint(g, x=x, y=y):
            return (g * local(x, y),)

        return _record(kind, y, (a,), adjoint)
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise TypeError(f"{kind} is binary")
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, b)
    _broadcast_shape(a.shape, b.shape)
    x, w = a.data, b.data
    if kind == "add":
        y = x + w
    elif kind == "sub":
        y = x - w
    elif kind == "mul":
        y = x * w
    else:
        y = x / w

    def adjoint(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga = g * w if a.requires_grad else None
            gb = g * x if b.requires_grad else None
        else:
            ga = g / w if a.requires_grad else None
            gb = -g * x / (w * w) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, x.shape),
            None if gb is None else _unbroadcast(gb, w.shape),
        )

    return _record(kind, y, (a, b), adjoint)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    y = np.where(x > 0, x, slope * x)

    def adjoint(g):
        return (np.where(x > 0, g, slope * g),)

    return _record("leaky_relu", y, (a,), adjoint)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    y = x**exponent

    def adjoint(g):
        return (g * exponent * x ** (exponent - 1),)

    return _record("pow", y, (a,), adjoint)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    x = a.data
    y = np.clip(x, lo, hi)

    def adjoint(g):
        return (g * ((x >= lo) & (x <= hi)),)

    return _record("clip", y, (a,), adjoint)


# -- linear algebra and structure ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b`` (a leading batch dim on ``a`` is allowed)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ShapeError(f"matmul expects [m,k] x [k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    x, w = a.data, b.data

    def adjoint(g):
        ga = g @ w.T if a.requires_grad else None
        gb = (np.outer(x, g) if x.ndim == 1 else x.T @ g) if b.requires_grad else None
        return ga, gb

    return _record("matmul", x @ w, (a, b), adjoint)


def softmax_temperature(s: Tensor, tau: float, axis: int = -1) -> Tensor:
    """``p_i = exp(s_i / tau) / sum_j exp(s_j / tau)`` along ``axis``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = _as_tensor(s)
    if not np.all(np.isfinite(s.data)):
        raise ValueError("softmax scores must be finite")
    z = s.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner) / tau,)

    return _record("softmax", p, (s,), adjoint)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    y = np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", y, (a,), adjoint)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    y = np.asarray(x.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(y.size, 1)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", y, (a,), adjoint)


def reshape(a: Tensor, shape) -> Tensor:
    x = a.data

    def adjoint(g):
        return (g.reshape(x.shape),)

    return _record("reshape", x.reshape(shape), (a,), adjoint)


def transpose(a: Tensor, axes=None) -> Tensor:
    x = a.data
    y = np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)

    def adjoint(g):
        return (np.transpose(g, inv),)

    return _record("transpose", y, (a,), adjoint)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    x = a.data
    y = x[index]
    if not isinstance(y, np.ndarray):
        y = np.asarray(y)

    def adjoint(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", y, (a,), adjoint)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def adjoint(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat", y, tensors, adjoint)


def broadcast_to(a: Tensor, shape) -> Tensor:
    x = a.data
    y = np.broadcast_to(x, shape).copy()

    def adjoint(g):
        return (_unbroadcast(g, x.shape),)

    return _record("broadcast", y, (a,), adjoint)


# -- backward ---------------------------------------------------------------------

class ComputationTape:
    """Nodes reachable from a loss, kept in insertion order."""

    def __init__(self, nodes: list[tuple[Node, Tensor]]):
        self.entries = sorted(nodes, key=lambda e: e[0].seq)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        seen: dict[int, tuple[Node, Tensor]] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in seen:
                continue
            if node.consumed:
                raise TapeError("graph was already consumed by an earlier backward()")
            seen[node.seq] = (node, t)
            stack.extend(node.inputs)
        return cls(list(seen.values()))

    def __len__(self) -> int:
        return len(self.entries)

    def is_topological(self) -> bool:
        pos = {id(t): i for i, (_, t) in enumerate(self.entries)}
        for i, (node, _) in enumerate(self.entries):
            for inp in node.inputs:
                j = pos.get(id(inp))
                if j is not None and j >= i:
                    return False
        return True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            raise TapeError("loss is a leaf; there is no recorded computation to differentiate")
        raise TapeError("loss does not require grad (empty tape)")
    tape = ComputationTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(tape.entries):
        g = grads.pop(id(out), None)
        adjoint = node.adjoint
        node.consumed = True
        node.adjoint = None
        if g is None:
            continue
        for inp, gi in zip(node.inputs, adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for node, _ in tape.entries:
        node.inputs = ()


# -- finite-difference checking ------------------------------------------------------

def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Returns the worst ``|analytic - numeric| / max(1, |numeric|)`` over the
    checked coordinates. ``max_coords`` caps the number of coordinates probed
    per input (sampled without replacement).
    """
    inputs = list(inputs)
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    backward(out)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(fn(*inputs).data)
                flat[i] = orig - eps
                down = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
