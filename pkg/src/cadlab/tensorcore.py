"""Dense float64 tensors with reverse-mode autodiff and an Adam/SGD optimizer.

Every learnable weight and every activation in the models is a :class:`Tensor`.
Operations record a graph node only when some input requires a gradient, so
inference passes build no graph at all.

Operations are registered by kind in :data:`OPS` and dispatched through
:func:`forward_op`; the module-level helpers (``matmul``, ``relu`` ...) are thin
wrappers around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flattened values."""
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- operation kernels -------------------------------------------------------
# Each kernel takes input tensors (+ attributes) and returns (value, backward).


def _k_add(a, b):
    _check_broadcast("add", a, b)
    return a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _k_sub(a, b):
    _check_broadcast("sub", a, b)
    return a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _k_mul(a, b):
    _check_broadcast("mul", a, b)
    av, bv = a.data, b.data
    return av * bv, lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))


def _k_scale(a, *, factor: float):
    return a.data * factor, lambda g: (g * factor,)


def _k_matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    return av @ bv, lambda g: (g @ bv.T, av.T @ g)


def _k_transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return a.data.T.copy(), lambda g: (g.T,)


def _k_concat(*xs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ: {[t.shape for t in xs]}")
    widths = np.cumsum([0] + [x.shape[-1] for x in xs])

    def back(g):
        return tuple(g[..., widths[i] : widths[i + 1]] for i in range(len(xs)))

    return np.concatenate([x.data for x in xs], axis=-1), back


def _segment_matrix(segment_ids: np.ndarray, num_segments: int, weights: np.ndarray):
    n = len(segment_ids)
    return sparse.csr_matrix(
        (weights, (segment_ids, np.arange(n))), shape=(num_segments, n)
    )


def _k_segment_mean(x, *, segment_ids, num_segments: int):
    # Rows of x grouped by segment id, averaged; empty segments give zero rows.
    ids = np.asarray(segment_ids, dtype=np.int64)
    if x.data.ndim != 2 or len(ids) != x.shape[0]:
        raise ShapeError(f"segment_mean: {len(ids)} ids for input of shape {x.shape}")
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    S = _segment_matrix(ids, num_segments, inv[ids])
    return S @ x.data, lambda g: (S.T @ g,)


def _k_gather(x, *, index):
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim < 1 or (len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"gather: index out of range for shape {x.shape}")
    n = x.shape[0]

    def back(g):
        G = _segment_matrix(idx, n, np.ones(len(idx)))
        return (G @ g.reshape(len(idx), -1)).reshape((n,) + x.shape[1:]),

    return x.data[idx], back


def _k_sum(x):
    shape = x.shape
    return np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),)


def _k_mean(x):
    shape, n = x.shape, x.data.size
    return np.array(x.data.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),)


def _k_relu(x):
    on = x.data > 0
    return np.where(on, x.data, 0.0), lambda g: (g * on,)


def _k_sigmoid(x):
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out, lambda g: (g * out * (1.0 - out),)


def _k_softmax(x):
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: expected rows, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return out, back


def _k_log(x):
    v = np.maximum(x.data, PROB_FLOOR)
    live = x.data >= PROB_FLOOR
    return np.log(v), lambda g: (g * live / v,)


def _k_power(x, *, exponent: float):
    if not 0.0 < exponent <= 1.0:
        raise ValueError(f"power: exponent must lie in (0, 1], got {exponent}")
    if np.any(x.data > 1.0 + 1e-9):
        raise ValueError("power: base must lie in (0, 1]")
    v = np.maximum(x.data, PROB_FLOOR)
    live = x.data >= PROB_FLOOR
    out = v**exponent
    return out, lambda g: (g * live * exponent * out / v,)


def _k_stop_gradient(x):
    return x.data.copy(), None


OPS: dict[str, Callable] = {
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "scale": _k_scale,
    "matmul": _k_matmul,
    "transpose": _k_transpose,
    "concat": _k_concat,
    "segment_mean": _k_segment_mean,
    "gather": _k_gather,
    "sum": _k_sum,
    "mean": _k_mean,
    "relu": _k_relu,
    "sigmoid": _k_sigmoid,
    "softmax": _k_softmax,
    "log": _k_log,
    "power": _k_power,
    "stop_gradient": _k_stop_gradient,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate operation ``kind`` on ``inputs``; record a node if any input needs grad."""
    try:
        kernel = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    ins = tuple(as_tensor(x) for x in inputs)
    value, back = kernel(*ins, **attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = back is not None and any(t.requires_grad for t in ins)
    out.node = Node(kind, ins, back) if out.requires_grad else None
    return out


def add(a, b):
    return forward_op("add", (a, b))


def sub(a, b):
    return forward_op("sub", (a, b))


def mul(a, b):
    return forward_op("mul", (a, b))


def scale(a, factor: float):
    return forward_op("scale", (a,), factor=float(factor))


def matmul(a, b):
    return forward_op("matmul", (a, b))


def transpose(a):
    return forward_op("transpose", (a,))


def linear(x, W, b=None):
    """``x @ W.T (+ b)`` for a weight stored output-by-input."""
    out = matmul(x, transpose(W))
    return out if b is None else add(out, b)


def concat(xs: Sequence):
    return forward_op("concat", tuple(xs))


def segment_mean(x, segment_ids, num_segments: int):
    return forward_op("segment_mean", (x,), segment_ids=segment_ids, num_segments=num_segments)


def gather(x, index):
    return forward_op("gather", (x,), index=index)


def tsum(x):
    return forward_op("sum", (x,))


def mean(x):
    return forward_op("mean", (x,))


def relu(x):
    return forward_op("relu", (x,))


def sigmoid(x):
    return forward_op("sigmoid", (x,))


def softmax(x):
    return forward_op("softmax", (x,))


def log(x):
    return forward_op("log", (x,))


def power(x, exponent: float):
    return forward_op("power", (x,), exponent=float(exponent))


def stop_gradient(x):
    return forward_op("stop_gradient", (x,))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf needing grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor detached from any recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# -- parameters and optimizer ------------------------------------------------


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParameterStore:
    """Uniquely named parameters plus per-parameter optimizer state."""

    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, _Moments] = field(default_factory=dict)
    step: int = 0
    mode: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def add(self, path: str, value, *, trainable: bool = True) -> Tensor:
        if path in self.params:
            raise KeyError(f"parameter path {path!r} already registered")
        t = Tensor(value, requires_grad=trainable, name=path)
        self.params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def trainable(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, t) for k, t in self.params.items() if t.requires_grad)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r} in checkpoint")
            if self.params[k].shape != np.shape(arr):
                raise ShapeError(f"{k}: checkpoint shape {np.shape(arr)} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)


def optimizer_step(store: ParameterStore, lr: float) -> ParameterStore:
    """One Adam (or plain gradient, ``store.mode == "sgd"``) step; clears grads after."""
    live = list(store.trainable())
    missing = [k for k, t in live if t.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
    store.step += 1
    b1, b2 = store.betas
    for k, t in live:
        g = t.grad
        if store.mode == "sgd":
            t.data = t.data - lr * g
        else:
            st = store.state.get(k)
            if st is None:
                st = store.state[k] = _Moments(np.zeros_like(t.data), np.zeros_like(t.data))
            st.m = b1 * st.m + (1 - b1) * g
            st.v = b2 * st.v + (1 - b2) * g * g
            m_hat = st.m / (1 - b1**store.step)
            v_hat = st.v / (1 - b2**store.step)
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + store.eps)
        t.grad = None
    return store


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))
