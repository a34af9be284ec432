"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Value` wraps an ndarray and remembers the primitive that produced
it, so a scalar loss can be backpropagated to every parameter with
:func:`backward`.  The primitive set is intentionally small: exactly what the
model needs, each with a hand-written backward rule that is verified against
central finite differences in the test suite.

Graphs are built and backpropagated on a single thread.  A :class:`ParamStore`
may be shared read-only between threads for inference; training mutates
parameters from one thread only.  Array data is treated as immutable once
wrapped in a Value.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's shape rule."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64


def set_precision(name: str) -> None:
    """Select the global float width, ``"f32"`` or ``"f64"``.

    64-bit is the default and is required by the numeric test suites; 32-bit
    trades accuracy for speed during training.
    """
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def precision() -> str:
    return "f32" if _default_dtype == np.float32 else "f64"


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def neg_inf() -> float:
    """Large negative finite stand-in for -inf, sized to the active precision."""
    return -1e9 if _default_dtype == np.float32 else -1e18


def precision_from_env() -> None:
    """Apply the PICK_KIE_PRECISION environment variable, if set."""
    name = os.environ.get("PICK_KIE_PRECISION")
    if name:
        set_precision(name)


class Value:
    """A node in the computation graph: data plus accumulated gradient.

    ``op`` names the producing primitive (None for leaves).  ``grad`` is
    lazily allocated and always matches ``data`` in shape.  Nodes that do not
    require gradients drop their parent links, so inference builds no graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str | None = None,
        parents: tuple["Value", ...] = (),
        backward_fn: Callable | None = None,
    ):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.op or "leaf"
        return f"Value(shape={self.data.shape}, op={tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Value):
            return multiply(self, power(other, -1.0))
        return multiply(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_value(x) -> Value:
    """Wrap plain arrays/scalars as constant (non-differentiable) Values."""
    if isinstance(x, Value):
        return x
    return Value(x)


def constant(x) -> Value:
    return Value(x)


def _make(data, op: str, parents: tuple[Value, ...], backward_fn: Callable) -> Value:
    # Prune: outputs that need no gradient keep no graph edges.
    if any(p.requires_grad for p in parents):
        return Value(data, True, op, parents, backward_fn)
    return Value(data, False, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (standard trailing-axis broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- primitives ---------------------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, "add", (a, b), bw)


def subtract(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, "subtract", (a, b), bw)


def multiply(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(data, "multiply", (a, b), bw)


def matmul(a, b) -> Value:
    """Matrix product with numpy batching over leading axes; operands >= 2-d."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(data, "matmul", (a, b), bw)


def absval(a) -> Value:
    a = as_value(a)
    data = np.abs(a.data)

    def bw(g):
        return ((a, g * np.sign(a.data)),)

    return _make(data, "abs", (a,), bw)


def exp(a) -> Value:
    a = as_value(a)
    data = np.exp(a.data)

    def bw(g):
        return ((a, g * data),)

    return _make(data, "exp", (a,), bw)


def log(a) -> Value:
    a = as_value(a)
    data = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(data, "log", (a,), bw)


def softmax(a, axis: int = -1) -> Value:
    """Softmax along ``axis`` (row-softmax for matrices), max-subtracted."""
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((a, data * (g - inner)),)

    return _make(data, "softmax", (a,), bw)


def leaky_relu(a, slope: float = 0.01) -> Value:
    a = as_value(a)
    data = np.where(a.data > 0, a.data, slope * a.data)

    def bw(g):
        return ((a, g * np.where(a.data > 0, 1.0, slope)),)

    return _make(data, "leaky-relu", (a,), bw)


def relu(a) -> Value:
    a = as_value(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        return ((a, g * (a.data > 0)),)

    return _make(data, "relu", (a,), bw)


def sigmoid(a) -> Value:
    a = as_value(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, "sigmoid", (a,), bw)


def tanh(a) -> Value:
    a = as_value(a)
    data = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, "tanh", (a,), bw)


def _restore_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return ((a, _restore_reduced(g, a.shape, axis, keepdims)),)

    return _make(data, "sum", (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if a.data.size else 1
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.data.ndim]

    def bw(g):
        return ((a, _restore_reduced(g, a.shape, axis, keepdims) / count),)

    return _make(data, "mean", (a,), bw)


def sum_squares(a) -> Value:
    """Squared L2 norm of all elements, as a scalar."""
    a = as_value(a)
    data = np.asarray((a.data * a.data).sum())

    def bw(g):
        return ((a, 2.0 * g * a.data),)

    return _make(data, "sum-squares", (a,), bw)


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    if not vals:
        raise ShapeError("concat: need at least one input")
    try:
        data = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} on axis {axis}") from e
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            sl[axis] = slice(lo, hi)
            out.append((v, g[tuple(sl)]))
        return out

    return _make(data, "concat", tuple(vals), bw)


def getitem(a, idx) -> Value:
    a = as_value(a)
    data = a.data[idx]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return ((a, gx),)

    return _make(data, "slice", (a,), bw)


def take(a, indices) -> Value:
    """Gather rows of ``a`` along axis 0; index array of any shape."""
    a = as_value(a)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("take: indices must be integers")
    data = a.data[indices]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, indices, g)
        return ((a, gx),)

    return _make(data, "take", (a,), bw)


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g):
        return ((a, np.transpose(g, inv)),)

    return _make(data, "transpose", (a,), bw)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: {a.shape} does not broadcast to {tuple(shape)}") from e

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)),)

    return _make(data, "broadcast", (a,), bw)


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} to {tuple(shape)}") from e

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return _make(data, "reshape", (a,), bw)


def power(a, p: float) -> Value:
    """Elementwise power with a constant real exponent."""
    a = as_value(a)
    p = float(p)
    data = a.data**p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(data, "power", (a,), bw)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Value:
    """2-d convolution, NHWC layout; kernel [kh, kw, c_in, c_out].

    Forward runs as an im2col matmul; backward scatters patch gradients back.
    """
    x, kernel, bias = as_value(x), as_value(kernel), as_value(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [n, h, w, c], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [kh, kw, c_in, c_out], got {kernel.shape}")
    n, h, w, c_in = x.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel channels {kc_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [n, ho, wo, c_in, kh, kw]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c_in)
    kmat = kernel.data.reshape(kh * kw * c_in, c_out)
    data = (cols @ kmat + bias.data).reshape(n, ho, wo, c_out)

    def bw(g):
        g2 = g.reshape(n * ho * wo, c_out)
        gk = (cols.T @ g2).reshape(kh, kw, c_in, c_out)
        gb = g2.sum(axis=0)
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c_in)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, i, j, :
                ]
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding, :]
        else:
            gx = gxp
        return ((x, gx), (kernel, gk), (bias, gb))

    return _make(data, "conv2d", (x, kernel, bias), bw)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "abs": absval,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "leaky-relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "sum-squares": sum_squares,
    "concat": concat,
    "slice": getitem,
    "take": take,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "power": power,
    "conv2d": conv2d,
}


def primitive_forward(kind: str, inputs: Iterable, **attrs) -> Value:
    """Dispatch a primitive by id; the named functions above are the implementations."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    inputs = list(inputs)
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# -- backward pass ------------------------------------------------------------


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every reachable node.

    ``root`` must be scalar.  Each call propagates a fresh unit seed, so
    calling twice without zeroing doubles the gradients exactly.
    """
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    order: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg
        if node.grad is None:
            node.grad = np.array(g, dtype=node.data.dtype, copy=True)
        else:
            node.grad = node.grad + g


class ParamStore:
    """Named trainable tensors; iteration is always sorted by name."""

    def __init__(self):
        self._entries: dict[str, Value] = {}

    def add(self, name: str, data) -> Value:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = data if isinstance(data, Value) else Value(data)
        v.requires_grad = True
        self._entries[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Value]]:
        return [(n, self._entries[n]) for n in self.names()]

    def zero_grads(self) -> None:
        for _, v in self.items():
            v.zero_grad()


def zero_grads(store: ParamStore) -> None:
    store.zero_grads()


# -- finite-difference checking ------------------------------------------------


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every element of ``array``.

    ``array`` is perturbed in place and restored; ``f`` must recompute the
    forward pass from it.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        f_plus = f()
        flat[i] = old - eps
        f_minus = f()
        flat[i] = old
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error, |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def group_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-relative error for a parameter group: ||a - n||_inf / max(||a||_inf, ||n||_inf)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def check_gradients(
    loss_fn: Callable[[], Value],
    store: ParamStore,
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Returns the norm-relative error per parameter name.  With
    ``samples_per_param`` set, only that many randomly chosen elements of each
    parameter are finite-differenced (the analytic side is always complete).
    """
    store.zero_grads()
    loss = loss_fn()
    backward(loss)
    analytic = {name: np.array(v.grad, copy=True) for name, v in store.items()}

    def f() -> float:
        return float(loss_fn().data)

    errors: dict[str, float] = {}
    for name, v in store.items():
        flat = v.data.reshape(-1)
        n_elem = flat.size
        if samples_per_param is not None and samples_per_param < n_elem:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n_elem, size=samples_per_param, replace=False)
        else:
            idxs = np.arange(n_elem)
        numeric = np.zeros(len(idxs))
        for k, i in enumerate(idxs):
            old = flat[i]
            flat[i] = old + eps
            f_plus = f()
            flat[i] = old - eps
            f_minus = f()
            flat[i] = old
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
        errors[name] = group_relative_error(analytic[name].reshape(-1)[idxs], numeric)
    return errors
