"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written with the differentiable ops defined in this
module, so running ``grad(..., create_graph=True)`` records the gradient
computation itself as graph nodes and the result can be differentiated again.
"""

from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

L2_EPS = 1e-12


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple  # tuple[Tensor, ...]
    attrs: dict
    out: Any = None  # Tensor
    backward: Callable | None = None


class Graph:
    """Append-only op record. Node ids are topologically ordered."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op, inputs, attrs, out, backward) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), attrs, out, backward)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward op from the leaf values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.out.data.copy())
                continue
            args = []
            for t in node.inputs:
                n = t._live_node(self)
                args.append(values[n.id] if n is not None else t.data)
            values.append(_FORWARD[node.op](*args, **node.attrs))
        return values


_graph = Graph()
_grad_enabled = True


def default_graph() -> Graph:
    return _graph


def reset_graph() -> None:
    _graph.reset()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "_gen", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self._gen = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._node = None
        t._gen = -1
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

    def _live_node(self, graph: Graph | None = None) -> Node | None:
        graph = graph or _graph
        if self._node is not None and self._gen == graph.generation:
            return self._node
        return None

    @property
    def node(self) -> Node | None:
        """Node in the active graph, registering a leaf on first use."""
        n = self._live_node()
        if n is None and self.requires_grad:
            n = _graph._append("leaf", (), {}, self, None)
            self._node, self._gen = n, _graph.generation
        return n

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._live_node() is not None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(like.shape, float(x)))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# --------------------------------------------------------------------------
# op machinery

_FORWARD: dict[str, Callable[..., np.ndarray]] = {}


def _register(name):
    def deco(fn):
        _FORWARD[name] = fn
        return fn

    return deco


def _apply(op: str, inputs: Sequence[Tensor], backward_factory, **attrs) -> Tensor:
    """Run forward for ``op`` and record a node if any input is tracked.

    ``backward_factory(inputs, out)`` returns ``fn(g, needs) -> grads``.
    """
    arr = _FORWARD[op](*(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(arr)
    if _grad_enabled and any(t.tracked for t in inputs):
        for t in inputs:
            t.node  # registers leaves before the output node
        node = _graph._append(op, inputs, attrs, out, None)
        node.backward = backward_factory(tuple(inputs), out, attrs)
        out._node, out._gen = node, _graph.generation
    return out


def _check_same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise

_register("add")(lambda a, b: a + b)
_register("sub")(lambda a, b: a - b)
_register("mul")(lambda a, b: a * b)
_register("div")(lambda a, b: a / b)
_register("abs")(np.abs)
_register("relu")(lambda a: np.maximum(a, 0.0))
_register("one_minus")(lambda a: 1.0 - a)
_register("mul_scalar")(lambda a, c: a * c)
_register("add_scalar")(lambda a, c: a + c)


@_register("sigmoid")
def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _apply("add", (a, b), lambda i, o, k: lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _apply("sub", (a, b), lambda i, o, k: lambda g, n: (g, neg(g) if n[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def factory(inputs, out, attrs):
        x, y = inputs
        return lambda g, n: (mul(g, y) if n[0] else None, mul(g, x) if n[1] else None)

    return _apply("mul", (a, b), factory)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def factory(inputs, out, attrs):
        x, y = inputs

        def bw(g, n):
            ga = div(g, y) if n[0] else None
            gb = neg(mul(g, div(out, y))) if n[1] else None
            return ga, gb

        return bw

    return _apply("div", (a, b), factory)


def neg(a: Tensor) -> Tensor:
    return mul_scalar(a, -1.0)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _apply("mul_scalar", (a,), lambda i, o, k: lambda g, n: (mul_scalar(g, k["c"]),), c=float(c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _apply("add_scalar", (a,), lambda i, o, k: lambda g, n: (g,), c=float(c))


def one_minus(a: Tensor) -> Tensor:
    return _apply("one_minus", (a,), lambda i, o, k: lambda g, n: (neg(g),))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    def factory(inputs, out, attrs):
        # abs'(0) = 0
        sign = Tensor._wrap(np.sign(inputs[0].data))
        return lambda g, n: (mul(g, sign),)

    return _apply("abs", (a,), factory)


def relu(a: Tensor) -> Tensor:
    def factory(inputs, out, attrs):
        # relu'(0) = 0
        mask = Tensor._wrap((inputs[0].data > 0).astype(np.float64))
        return lambda g, n: (mul(g, mask),)

    return _apply("relu", (a,), factory)


def sigmoid(a: Tensor) -> Tensor:
    def factory(inputs, out, attrs):
        return lambda g, n: (mul(g, mul(out, one_minus(out))),)

    return _apply("sigmoid", (a,), factory)


_UNARY = {"abs": abs, "relu": relu, "sigmoid": sigmoid, "one_minus": one_minus}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# shape ops and reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@_register("sum")
def _sum_fwd(a, axis, keepdims):
    return np.asarray(np.sum(a, axis=axis, keepdims=keepdims), dtype=np.float64)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)

    def factory(inputs, out, attrs):
        shape = inputs[0].shape
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

        def bw(g, n):
            return (broadcast_to(reshape(g, kshape), shape),)

        return bw

    return _apply("sum", (a,), factory, axis=axes, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul_scalar(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


@_register("broadcast_to")
def _broadcast_fwd(a, shape):
    return np.ascontiguousarray(np.broadcast_to(a, shape))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def factory(inputs, out, attrs):
        src = inputs[0].shape
        return lambda g, n: (sum_to(g, src),)

    return _apply("broadcast_to", (a,), factory, shape=shape)


def sum_to(g: Tensor, shape) -> Tensor:
    """Reduce ``g`` to ``shape`` by summing over numpy-broadcast axes."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    axes += [lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1]
    out = sum(g, axis=tuple(axes), keepdims=False) if axes else g
    return reshape(out, shape)


@_register("reshape")
def _reshape_fwd(a, shape):
    return a.reshape(shape)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a

    def factory(inputs, out, attrs):
        src = inputs[0].shape
        return lambda g, n: (reshape(g, src),)

    return _apply("reshape", (a,), factory, shape=shape)


@_register("transpose")
def _transpose_fwd(a, axes):
    return np.ascontiguousarray(np.transpose(a, axes))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", (a,), lambda i, o, k: lambda g, n: (transpose(g, inv),), axes=axes)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


@_register("max")
def _max_fwd(a, axes, keepdims):
    return np.asarray(np.max(a, axis=axes, keepdims=keepdims), dtype=np.float64)


def max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max over ``axis``; the gradient goes to the first maximum in row-major order."""
    axes = _norm_axes(axis, a.ndim)

    def factory(inputs, out, attrs):
        x = inputs[0].data
        keep = [i for i in range(x.ndim) if i not in axes]
        moved = np.transpose(x, keep + list(axes))
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        onehot = onehot.reshape(moved.shape)
        onehot = Tensor._wrap(np.ascontiguousarray(np.transpose(onehot, np.argsort(keep + list(axes)))))
        kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

        def bw(g, n):
            return (mul(broadcast_to(reshape(g, kshape), x.shape), onehot),)

        return bw

    return _apply("max", (a,), factory, axes=axes, keepdims=keepdims)


@_register("matmul")
def _matmul_fwd(a, b):
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, both operands of rank >= 2."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {a.shape} @ {b.shape}")

    def factory(inputs, out, attrs):
        x, y = inputs

        def bw(g, n):
            ga = sum_to(matmul(g, swap_last(y)), x.shape) if n[0] else None
            gb = sum_to(matmul(swap_last(x), g), y.shape) if n[1] else None
            return ga, gb

        return bw

    return _apply("matmul", (a, b), factory)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("dot expects rank-1 tensors")
    if a.shape != b.shape:
        raise ValueError(f"dot: length mismatch {a.shape[0]} vs {b.shape[0]}")
    return sum(mul(a, b))


@_register("take")
def _take_fwd(a, idx):
    return a[idx]


@_register("index_add")
def _index_add_fwd(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


def take(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]`` along the first axis."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    return _apply("take", (a,), lambda i, o, k: lambda g, n: (_index_add(g, idx, shape),), idx=idx)


def _index_add(g: Tensor, idx: np.ndarray, shape) -> Tensor:
    return _apply("index_add", (g,), lambda i, o, k: lambda gg, n: (take(gg, idx),), idx=idx, shape=tuple(shape))


@_register("concat")
def _concat_fwd(*arrays):
    return np.concatenate(arrays, axis=0)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Join along the first axis."""
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    tail = tensors[0].shape[1:]
    if any(t.shape[1:] != tail for t in tensors):
        raise ValueError("concat: trailing shapes differ")
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def factory(inputs, out, attrs):
        def bw(g, need):
            return tuple(
                take(g, np.arange(offsets[i], offsets[i + 1])) if need[i] else None for i in range(len(inputs))
            )

        return bw

    return _apply("concat", tensors, factory)


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    offsets = np.cumsum([0] + list(sizes))
    if offsets[-1] != a.shape[0]:
        raise ValueError("split sizes do not cover the first axis")
    return [take(a, np.arange(offsets[i], offsets[i + 1])) for i in range(len(sizes))]


@_register("l2_distance")
def _l2_fwd(a, b, eps):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1) + eps)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance over the last axis, ``sqrt(sum (a-b)^2 + eps)``."""
    if a.shape != b.shape:
        raise ValueError(f"l2_distance: shape mismatch {a.shape} vs {b.shape}")

    def factory(inputs, out, attrs):
        x, y = inputs

        def bw(g, n):
            diff = sub(x, y)
            col = out.shape + (1,)
            scale = broadcast_to(reshape(div(g, out), col), x.shape)
            ga = mul(scale, diff)
            return ga if n[0] else None, neg(ga) if n[1] else None

        return bw

    return _apply("l2_distance", (a, b), factory, eps=L2_EPS)


# --------------------------------------------------------------------------
# convolution and pooling


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


# Convolution, its input gradient and its weight gradient are each linear in
# both arguments and mutually adjoint, so the three ops differentiate into
# one another to any order.


@_register("conv2d")
def _conv2d_fwd(x, w, b, stride, pad):
    co, _, k, _ = w.shape
    ho, wo = _out_size(x.shape[2], k, stride, pad), _out_size(x.shape[3], k, stride, pad)
    out = np.matmul(w.reshape(co, -1), _im2col(x, k, stride, pad))
    if b is not None:
        out += b[None, :, None]
    return out.reshape(x.shape[0], co, ho, wo)


@_register("conv2d_grad_input")
def _conv_gx_fwd(g, w, x_shape, stride, pad):
    co, _, k, _ = w.shape
    gm = g.reshape(g.shape[0], co, -1)
    return np.ascontiguousarray(_col2im(np.matmul(w.reshape(co, -1).T, gm), x_shape, k, stride, pad))


@_register("conv2d_grad_weight")
def _conv_gw_fwd(x, g, w_shape, stride, pad):
    co, _, k, _ = w_shape
    gm = g.reshape(g.shape[0], co, -1)
    cols = _im2col(x, k, stride, pad)
    return np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)


def _conv_nobias(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    def factory(inputs, out, attrs):
        xi, wi = inputs

        def bw(g, need):
            gx = _conv_grad_input(g, wi, xi.shape, stride, pad) if need[0] else None
            gw = _conv_grad_weight(xi, g, wi.shape, stride, pad) if need[1] else None
            return gx, gw

        return bw

    return _apply("conv2d", (x, w), factory, stride=stride, pad=pad, b=None)


def _conv_grad_input(g: Tensor, w: Tensor, x_shape, stride: int, pad: int) -> Tensor:
    def factory(inputs, out, attrs):
        gi, wi = inputs

        def bw(h, need):
            dg = _conv_nobias(h, wi, stride, pad) if need[0] else None
            dw = _conv_grad_weight(h, gi, wi.shape, stride, pad) if need[1] else None
            return dg, dw

        return bw

    return _apply("conv2d_grad_input", (g, w), factory, x_shape=tuple(x_shape), stride=stride, pad=pad)


def _conv_grad_weight(x: Tensor, g: Tensor, w_shape, stride: int, pad: int) -> Tensor:
    def factory(inputs, out, attrs):
        xi, gi = inputs

        def bw(h, need):
            dx = _conv_grad_input(gi, h, xi.shape, stride, pad) if need[0] else None
            dg = _conv_nobias(xi, h, stride, pad) if need[1] else None
            return dx, dg

        return bw

    return _apply("conv2d_grad_weight", (x, g), factory, w_shape=tuple(w_shape), stride=stride, pad=pad)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a ``c_in x h x w`` (or batched) input."""
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), weights, bias, stride, pad)
        return reshape(y, y.shape[1:])
    if x.ndim != 4 or weights.ndim != 4:
        raise ValueError("conv2d expects x of rank 3 or 4 and weights of rank 4")
    co, ci, k, k2 = weights.shape
    if k != k2:
        raise ValueError("conv2d kernels must be square")
    if x.shape[1] != ci:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weights expect {ci}")
    if bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if k > x.shape[2] + 2 * pad or k > x.shape[3] + 2 * pad:
        raise ValueError("conv2d: kernel larger than padded input")

    def factory(inputs, out, attrs):
        xi, wi, bi = inputs

        def bw(g, need):
            gx = _conv_grad_input(g, wi, xi.shape, stride, pad) if need[0] else None
            gw = _conv_grad_weight(xi, g, wi.shape, stride, pad) if need[1] else None
            gb = sum(g, axis=(0, 2, 3)) if need[2] else None
            return gx, gw, gb

        return bw

    return _apply("conv2d", (x, weights, bias), factory, stride=stride, pad=pad)


_WINDOW = ((0, 0), (0, 1), (1, 0), (1, 1))  # row-major order inside a 2x2 window


@_register("pool_gather")
def _gather_fwd(x, idx):
    v = [x[..., di::2, dj::2] for di, dj in _WINDOW]
    return np.where(idx == 0, v[0], np.where(idx == 1, v[1], np.where(idx == 2, v[2], v[3])))


@_register("pool_scatter")
def _scatter_fwd(g, idx, x_shape):
    out = np.zeros(x_shape)
    for k, (di, dj) in enumerate(_WINDOW):
        out[..., di::2, dj::2] = np.where(idx == k, g, 0.0)
    return out


def _pool_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    shape = x.shape
    return _apply("pool_gather", (x,), lambda i, o, a: lambda g, n: (_pool_scatter(g, idx, shape),), idx=idx)


def _pool_scatter(g: Tensor, idx: np.ndarray, x_shape) -> Tensor:
    return _apply(
        "pool_scatter", (g,), lambda i, o, a: lambda gg, n: (_pool_gather(gg, idx),), idx=idx, x_shape=tuple(x_shape)
    )


def max_pool2x2(x: Tensor) -> Tensor:
    v = [x.data[..., di::2, dj::2] for di, dj in _WINDOW]
    m = np.maximum(np.maximum(v[0], v[1]), np.maximum(v[2], v[3]))
    # first maximum in row-major window order
    idx = np.where(v[0] == m, 0, np.where(v[1] == m, 1, np.where(v[2] == m, 2, 3))).astype(np.int8)
    return _pool_gather(x, idx)


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return mul_scalar(sum(r, axis=(3, 5)), 0.25)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean of each channel's spatial plane (last two axes)."""
    return mean(x, axis=(-2, -1))


def pool(kind: str, x: Tensor) -> Tensor:
    if kind == "global_avg":
        if x.ndim < 2:
            raise ValueError("global_avg needs a spatial plane")
        return global_avg_pool(x)
    if kind not in ("max2x2", "avg2x2"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"{kind} needs even spatial dims, got {x.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    elif x.ndim != 4:
        raise ValueError("2x2 pooling expects rank 3 or 4 input")
    y = max_pool2x2(x) if kind == "max2x2" else avg_pool2x2(x)
    return reshape(y, y.shape[1:]) if squeeze else y


# --------------------------------------------------------------------------
# differentiation


class GradientMap(dict):
    """Node id -> gradient Tensor. Also indexable by the Tensor itself."""

    def _key(self, key):
        if isinstance(key, Tensor):
            node = key._live_node()
            if node is None:
                raise KeyError("tensor is not part of the active graph")
            return node.id
        return key

    def __getitem__(self, key):
        return super().__getitem__(self._key(key))

    def __contains__(self, key):
        try:
            return super().__contains__(self._key(key))
        except KeyError:
            return False

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default


def _accumulate(grads: dict, nid: int, g: Tensor) -> None:
    prev = grads.get(nid)
    grads[nid] = g if prev is None else add(prev, g)


def _run_backward(seeds: dict[int, Tensor], relevant: set[int] | None, create_graph: bool, keep: set[int] | None):
    graph = _graph
    grads: dict[int, Tensor] = dict(seeds)
    result: dict[int, Tensor] = {}
    top = builtins.max(seeds)
    with enable_grad(create_graph):
        for nid in range(top, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            if keep is None or nid in keep:
                result[nid] = g
            node = graph.nodes[nid]
            if node.op == "leaf":
                continue
            in_nodes = [t._live_node() for t in node.inputs]
            needs = [n is not None and (relevant is None or n.id in relevant) for n in in_nodes]
            if not any(needs):
                continue
            in_grads = node.backward(g, needs)
            for n, need, gi in zip(in_nodes, needs, in_grads):
                if need and gi is not None:
                    _accumulate(grads, n.id, gi)
    return result


def _seed_for(out: Tensor, g: Tensor | None) -> Tensor:
    if g is None:
        return Tensor._wrap(np.ones(out.shape))
    if g.shape != out.shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {out.shape}")
    return g


def backward(output: Tensor, create_graph: bool = False) -> GradientMap:
    """Reverse accumulation from a scalar output over the whole active graph."""
    node = output._live_node()
    if node is None:
        raise GraphError("output is not part of the active graph")
    if output.size != 1 or output.ndim > 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    res = _run_backward({node.id: _seed_for(output, None)}, None, create_graph, None)
    return GradientMap(res)


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Tensor | Sequence[Tensor],
    grad_outputs: Tensor | Sequence[Tensor | None] | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian products of ``outputs`` w.r.t. ``inputs``.

    Inputs the outputs do not depend on get a zero gradient. Inputs that are
    not in the graph at all raise GraphError.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None or isinstance(grad_outputs, Tensor):
        grad_outputs = [grad_outputs] * len(outputs)
    seeds: dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        node = out._live_node()
        if node is None:
            raise GraphError("output is not part of the active graph")
        if g is None and out.size != 1:
            raise GraphError("non-scalar output needs an explicit grad_output")
        s = _seed_for(out, g)
        if node.id in seeds:
            s = add(seeds[node.id], s)
        seeds[node.id] = s
    in_ids = []
    for t in inputs:
        n = t.node
        if n is None:
            raise GraphError("input is not part of the active graph")
        in_ids.append(n.id)
    relevant = _descendants(set(in_ids), builtins.max(seeds))
    res = _run_backward(seeds, relevant, create_graph, set(in_ids))
    return [res.get(i, Tensor._wrap(np.zeros(t.shape))) for i, t in zip(in_ids, inputs)]


def _descendants(start: set[int], top: int) -> set[int]:
    nodes = _graph.nodes
    rel = set(start)
    lo = min(start) if start else top + 1
    for nid in range(lo, top + 1):
        if nid in rel:
            continue
        for t in nodes[nid].inputs:
            n = t._live_node()
            if n is not None and n.id in rel:
                rel.add(nid)
                break
    return rel
