"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (an op tag, the parent tensors and a closure that maps
the output gradient to parent gradients). :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order and accumulates gradients
into every reachable leaf that has ``requires_grad`` set.

Training runs in float32. float64 exists for gradient checking; select it with
:func:`precision` or by passing ``dtype`` explicitly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

EXP_CLAMP = 80.0
LEAKY_SLOPE = 0.2

_DEFAULT_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a function handed to :func:`grad_check` is unusable."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float64"`` for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """n-dimensional array that can take part in a gradient graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Gradients accumulate across calls; zero them between steps.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.dtype).reshape(self.shape)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = t.node.backward(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", _lift(other, self.dtype), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _lift(other, self.dtype), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", _lift(other, self.dtype), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _lift(other, self.dtype), self)

    def __neg__(self):
        return elementwise("negate", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def square(self):
        return elementwise("square", self)

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


class Parameter(Tensor):
    """Trainable leaf tensor. Its name is assigned by the owning module."""

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` and, if any parent needs gradients, attach a graph node.

    ``backward`` maps the output gradient to a tuple of parent gradients
    (``None`` for parents that need none).
    """
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _Node(op, tuple(parents), backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

_BINARY = ("add", "sub", "mul", "div")
_UNARY = ("exp", "log", "square", "negate")


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply ``op`` elementwise. Binary ops broadcast numpy-style."""
    a = as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _unary(op, a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = _lift(b, a.dtype)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    x, y = a.data, b.data
    if op == "add":
        data = x + y

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    elif op == "sub":
        data = x - y

        def bw(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    elif op == "mul":
        data = x * y

        def bw(g):
            return (unbroadcast(g * y, a.shape) if a.requires_grad else None,
                    unbroadcast(g * x, b.shape) if b.requires_grad else None)
    else:
        data = x / y

        def bw(g):
            ga = unbroadcast(g / y, a.shape) if a.requires_grad else None
            gb = unbroadcast(-g * x / (y * y), b.shape) if b.requires_grad else None
            return ga, gb
    assert data.shape == out_shape
    return make_result(data, op, (a, b), bw)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "exp":
        data = np.exp(np.minimum(x, EXP_CLAMP))

        def bw(g):
            # clamped region has zero slope
            return (g * data * (x <= EXP_CLAMP),)
    elif op == "log":
        data = np.log(x)

        def bw(g):
            return (g / x,)
    elif op == "square":
        data = x * x

        def bw(g):
            return (2 * g * x,)
    else:
        data = -x

        def bw(g):
            return (-g,)
    return make_result(data, op, (a,), bw)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def square(a):
    return elementwise("square", a)


def negate(a):
    return elementwise("negate", a)


# -- linear algebra and shape ops ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        return (g @ y.T if a.requires_grad else None,
                x.T @ g if b.requires_grad else None)

    return make_result(x @ y, "matmul", (a, b), bw)


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for tensor of rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """``sum`` or ``mean`` over ``axes`` (all axes when ``None``)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    data = a.data.sum(axis=axes, keepdims=keepdims)
    if op == "mean":
        data = data / np.asarray(count, dtype=a.dtype)
    data = np.asarray(data, dtype=a.dtype)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        g = g.reshape(kept_shape)
        if op == "mean":
            g = g / np.asarray(count, dtype=g.dtype)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(data, op, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return make_result(data, "reshape", (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return make_result(data, "transpose", (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(data, dtype=a.dtype), "getitem", (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(data, "concat", tensors, bw)


# -- activations ----------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def activation(op: str, a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Nonlinearity: ``leaky_relu`` (with ``slope``), ``sigmoid`` or ``tanh``."""
    x = a.data
    if op == "leaky_relu":
        mask = x > 0
        s = np.asarray(slope, dtype=x.dtype)
        data = np.where(mask, x, s * x)

        def bw(g):
            return (np.where(mask, g, s * g),)
    elif op == "sigmoid":
        data = _stable_sigmoid(x)

        def bw(g):
            return (g * data * (1 - data),)
    elif op == "tanh":
        data = np.tanh(x)

        def bw(g):
            return (g * (1 - data * data),)
    else:
        raise ValueError(f"unknown activation {op!r}")
    return make_result(data, op, (a,), bw)


def leaky_relu(a, slope: float = LEAKY_SLOPE):
    return activation("leaky_relu", a, slope)


def sigmoid(a):
    return activation("sigmoid", a)


def tanh(a):
    return activation("tanh", a)


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant label."""
    x = logits.data
    t = np.asarray(target, dtype=x.dtype)
    losses = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    data = np.asarray(losses.mean(), dtype=x.dtype)

    def bw(g):
        return (g * (_stable_sigmoid(x) - t) / n,)

    return make_result(data, "bce_with_logits", (logits,), bw)


# -- gradient checking -----------------------------------------------------------

def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(*x)`` must return a scalar
    tensor and be deterministic. Each coordinate is perturbed in place by
    ``+-h``. The error for a coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise GradCheckError(f"grad_check needs float64 inputs, got {t.dtype}")

    def value() -> float:
        out = f(*xs)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    first, second = value(), value()
    if first != second:
        raise GradCheckError(f"function is not deterministic: {first!r} != {second!r}")

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    f(*xs).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    for t, flag in zip(xs, saved):
        t.grad = None
        t.requires_grad = flag

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - numeric) / max(1.0, abs(ai)))
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
