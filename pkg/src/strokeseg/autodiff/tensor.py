"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a :class:`Node` carrying a globally
increasing index, so sorting the nodes reachable from a loss by index yields a
topological order. :func:`backward` walks that order in reverse and
accumulates fan-out contributions in node-index order, which keeps gradient
maps bit-stable across repeated calls.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Node",
    "ComputationGraph",
    "NumericError",
    "backward",
    "gradient_check",
    "no_grad",
    "grad_enabled",
    "precision",
    "set_precision",
    "get_dtype",
    "tensor",
    "as_tensor",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "matmul",
    "softmax",
    "concat",
    "reshape",
    "transpose",
    "pad",
    "elementwise",
    "dropout",
]


class NumericError(FloatingPointError):
    """Raised when an operation meets NaN or otherwise unusable numbers."""


_DTYPE = np.float64
_GRAD_ENABLED = True
_NODE_COUNTER = itertools.count()


def get_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def set_precision(name: str) -> None:
    """Select ``"float64"`` (checking mode) or ``"float32"`` (training mode)."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE = np.float64 if name == "float64" else np.float32


@contextlib.contextmanager
def precision(name: str):
    previous = np.dtype(_DTYPE).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; saved forward values are not retained."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One recorded operation: its inputs and the vector-Jacobian product."""

    __slots__ = ("index", "op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.index = next(_NODE_COUNTER)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op})"


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    Layout follows ``(batch, channels, *spatial)`` where it matters; the
    storage is a C-ordered numpy array so flat indices are the mixed-radix
    expansion of the coordinates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if 0 in arr.shape:
            raise ValueError(f"tensor extents must be non-zero, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        if 0 in data.shape:
            raise ValueError(f"tensor extents must be non-zero, got {data.shape}")
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._node = None
        out.name = None
        return out

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
    def dtype(self):
        return self.data.dtype

    @property
    def node(self) -> Node | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=_DTYPE)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._node = None
    out.name = None
    return out


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor._result(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph and backward


class ComputationGraph:
    """Nodes reachable from an output, sorted by recording index."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationGraph":
        seen: dict[int, Node] = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node.index in seen:
                continue
            seen[node.index] = node
            for t in node.inputs:
                if t._node is not None and t._node.index not in seen:
                    stack.append(t._node)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        return all(
            t._node is None or t._node.index < node.index
            for node in self.nodes
            for t in node.inputs
        )


def backward(loss: Tensor, graph: ComputationGraph | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate ``d loss`` to every ``requires_grad`` leaf.

    Returns a fresh map from leaf tensor to gradient array and also stores the
    gradient on each leaf's ``.grad`` (overwriting any previous value).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputationGraph.from_output(loss)
    grads_by_node: dict[int, np.ndarray] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return {loss: loss.grad}
        return {}
    grads_by_node[loss._node.index] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = grads_by_node.pop(node.index, None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = t._node.index
                if key in grads_by_node:
                    grads_by_node[key] = grads_by_node[key] + gi
                else:
                    grads_by_node[key] = gi
            else:
                key = id(t)
                leaves[key] = t
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + gi
                else:
                    leaf_grads[key] = gi
    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = np.asarray(leaf_grads[key], dtype=t.data.dtype).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


def gradient_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradients.

    Non-scalar outputs are summed first. The error per element is
    ``|a - n| / max(1, |a|, |n|)``. Runs in float64.
    """
    with precision("float64"):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(x0.copy(), requires_grad=True)
        out = f(xt)
        backward(out if out.size == 1 else out.sum())
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(Tensor(x0)).data.sum())
                flat[i] = orig - eps
                fm = float(f(Tensor(x0)).data.sum())
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("pow", ad ** exponent, (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[i] for i in axes)
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in idx)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out, copy=True), (a,), vjp)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` has one ``(before, after)`` pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _record("pad", np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcast leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ValueError(f"concat extents differ off axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(
            g[(slice(None),) * ax + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | int | None, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seed or generator")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return mul(x, Tensor._result(keep.astype(x.dtype, copy=False)))


def elementwise(x, kind: str, other=None, *, p: float = 0.0, seed=None, training: bool = True) -> Tensor:
    """Dispatch one of ``relu``, ``sigmoid``, ``add``, ``mul`` or ``dropout``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    if kind == "dropout":
        return dropout(as_tensor(x), p, seed, training)
    raise ValueError(f"unknown elementwise kind {kind!r}")


