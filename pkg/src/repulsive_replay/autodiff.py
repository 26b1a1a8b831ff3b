"""Small reverse-mode autodiff over float64 numpy arrays.

Operations are plain functions. When called inside ``with Graph() as g:``
each one appends a node to ``g``; outside a graph they simply compute.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

CLAMP = 1e-7

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "active_graph", default=None
)


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # arithmetic sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op: "Op", inputs: tuple[Tensor, ...], output: Tensor, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Graph:
    """Ordered record of the operations applied during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None
        self.visits = 0

    def __enter__(self) -> "Graph":
        if self._token is not None:
            raise GraphError("graph is already active")
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None
        return False

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from its recorded inputs."""
        return [n.op.forward(*(t.data for t in n.inputs))[0] for n in self.nodes]

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf with ``requires_grad``."""
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None and not loss.requires_grad:
            raise GraphError("loss was not produced on this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        self.visits = 0
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.op.backward(g, node.ctx, *(t.data for t in node.inputs))
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not _tracks(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and t not in leaves:
                    leaves[t] = grads.get(id(t), np.zeros_like(t.data))
        if loss.requires_grad and loss._node is None:
            leaves[loss] = np.ones_like(loss.data)
        return leaves


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


class Op:
    name = "op"

    def forward(self, *xs):
        """Return ``(output, ctx)``; ``ctx`` is handed back to backward."""
        raise NotImplementedError

    def backward(self, g, ctx, *xs):
        raise NotImplementedError

    def __call__(self, *inputs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        value, ctx = self.forward(*(t.data for t in tensors))
        out = Tensor(value)
        graph = _active_graph.get()
        if graph is not None and any(_tracks(t) for t in tensors):
            node = Node(self, tensors, out, ctx)
            out._node = node
            graph.nodes.append(node)
        return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return a @ b, None

    def backward(self, g, ctx, a, b):
        return g @ b.T, a.T @ g


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        try:
            return a + b, None
        except ValueError:
            raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None

    def backward(self, g, ctx, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        try:
            return a - b, None
        except ValueError:
            raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}") from None

    def backward(self, g, ctx, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        try:
            return a * b, None
        except ValueError:
            raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def backward(self, g, ctx, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, None

    def backward(self, g, ctx, a):
        return (-g,)


class _Exp(Op):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, out

    def backward(self, g, out, a):
        return (g * out,)


class _Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise FloatingPointError("log of non-positive value")
        return np.log(a), None

    def backward(self, g, ctx, a):
        return (g / a,)


class _Sigmoid(Op):
    """Logistic function with outputs clamped to [CLAMP, 1 - CLAMP]."""

    name = "sigmoid"

    def forward(self, a):
        # split by sign so exp never overflows
        raw = np.empty_like(a)
        pos = a >= 0
        raw[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        raw[~pos] = e / (1.0 + e)
        out = np.clip(raw, CLAMP, 1.0 - CLAMP)
        return out, (raw, out)

    def backward(self, g, ctx, a):
        raw, out = ctx
        inside = (raw >= CLAMP) & (raw <= 1.0 - CLAMP)
        return (g * raw * (1.0 - raw) * inside,)


class _Relu(Op):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0), None

    def backward(self, g, ctx, a):
        return (g * (a > 0),)


class _Clip(Op):
    name = "clip"

    def __init__(self, lo: float, hi: float):
        self.lo, self.hi = lo, hi

    def forward(self, a):
        return np.clip(a, self.lo, self.hi), None

    def backward(self, g, ctx, a):
        return (g * ((a >= self.lo) & (a <= self.hi)),)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis: int | None):
        self.axis = axis

    def forward(self, a):
        return a.sum(axis=self.axis), None

    def backward(self, g, ctx, a):
        if self.axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, self.axis), a.shape).copy(),)


class _Softmax(Op):
    name = "softmax"

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    def backward(self, g, out, a):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


class _LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - lse
        return out, out

    def backward(self, g, out, a):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


class _Columns(Op):
    name = "columns"

    def __init__(self, idx: Sequence[int]):
        self.idx = np.asarray(idx, dtype=np.intp)

    def forward(self, a):
        return a[..., self.idx], None

    def backward(self, g, ctx, a):
        out = np.zeros_like(a)
        out[..., self.idx] = g
        return (out,)


class _Pick(Op):
    """Select one entry per row: ``out[i] = a[i, idx[i]]``."""

    name = "pick"

    def __init__(self, idx: Sequence[int]):
        self.idx = np.asarray(idx, dtype=np.intp)

    def forward(self, a):
        if a.ndim != 2 or a.shape[0] != len(self.idx):
            raise DimensionError(f"pick: {a.shape} with {len(self.idx)} indices")
        return a[np.arange(a.shape[0]), self.idx], None

    def backward(self, g, ctx, a):
        out = np.zeros_like(a)
        out[np.arange(a.shape[0]), self.idx] = g
        return (out,)


class _Rows(Op):
    name = "rows"

    def __init__(self, idx: Sequence[int]):
        self.idx = np.asarray(idx, dtype=np.intp)

    def forward(self, a):
        return a[self.idx], None

    def backward(self, g, ctx, a):
        out = np.zeros_like(a)
        np.add.at(out, self.idx, g)
        return (out,)


class _Detach(Op):
    name = "detach"

    def forward(self, a):
        return a.copy(), None

    def backward(self, g, ctx, a):
        return (None,)


matmul = _MatMul()
add = _Add()
sub = _Sub()
mul = _Mul()
neg = _Neg()
exp = _Exp()
log = _Log()
sigmoid = _Sigmoid()
relu = _Relu()
softmax = _Softmax()
log_softmax = _LogSoftmax()
detach = _Detach()


def clip(t, lo: float, hi: float) -> Tensor:
    return _Clip(lo, hi)(t)


def sum(t, axis: int | None = None) -> Tensor:  # noqa: A001
    return _Sum(axis)(t)


def mean(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    count = t.data.size if axis is None else t.shape[axis]
    return mul(_Sum(axis)(t), 1.0 / count)


def columns(t, idx: Sequence[int]) -> Tensor:
    return _Columns(idx)(t)


def pick(t, idx: Sequence[int]) -> Tensor:
    return _Pick(idx)(t)


def rows(t, idx: Sequence[int]) -> Tensor:
    return _Rows(idx)(t)


def grad_check(
    f: Callable[[Tensor], Tensor], at, h: float = 1e-5
) -> float:
    """Max relative error between backward() and central differences.

    Relative error per entry is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(as_tensor(at).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Graph() as g:
        out = f(leaf)
    analytic = g.backward(out).get(leaf, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        probe = x0.copy().reshape(-1)
        try:
            probe[i] += h
            up = f(Tensor(probe.reshape(x0.shape))).item()
            probe[i] -= 2 * h
            down = f(Tensor(probe.reshape(x0.shape))).item()
        except (FloatingPointError, ValueError):
            up = down = np.nan
        if not (np.isfinite(up) and np.isfinite(down)):
            idx = tuple(int(j) for j in np.unravel_index(i, x0.shape))
            raise FloatingPointError(f"non-finite function value probing index {idx}")
        flat[i] = (up - down) / (2 * h)
    if x0.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max())
