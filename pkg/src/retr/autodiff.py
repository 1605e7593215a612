"""Reverse-mode automatic differentiation over dense float64 tensors.

Every op records a node (kind, parents, saved values) when any input requires
grad and recording is enabled. ``backward`` rebuilds the tape from the loss by
a deterministic topological walk and replays it in reverse.

Gradient rules live in ``GRAD_RULES`` keyed by op kind, so a rule can be
swapped out (tests use this for negative controls).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "GradCheckError",
    "GRAD_RULES",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "softplus",
    "abs_",
    "concat",
    "slice_",
    "take",
    "spmm",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_",
    "mean",
    "max_",
    "softmax",
    "tensor_op",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, message: str, param_index: int, entry_index: int):
        super().__init__(message)
        self.param_index = param_index
        self.entry_index = entry_index


_ids = itertools.count(1)
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (inference, sampling passes)."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what} (shape {tuple(arr.shape)})")


class Tensor:
    """A value on the tape. ``node_id`` is None for constants."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "parents", "saved", "attrs", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = next(_ids) if requires_grad else None
        self.op: Optional[str] = None
        self.parents: Tuple["Tensor", ...] = ()
        self.saved: tuple = ()
        self.attrs: dict = {}
        self.name = name

    @classmethod
    def _from_op(cls, out: np.ndarray, op: str, parents: Sequence["Tensor"], saved=(), attrs=None) -> "Tensor":
        _check_finite(out, f"result of {op}")
        t = cls.__new__(cls)
        t.data = out
        t.grad = None
        t.name = None
        t.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t.node_id = next(_ids)
            t.op = op
            t.parents = tuple(parents)
            t.saved = tuple(saved)
            t.attrs = attrs or {}
        else:
            t.node_id = None
            t.op = None
            t.parents = ()
            t.saved = ()
            t.attrs = {}
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return constant(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __array_priority__ = 1000

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------- broadcasting


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    # rank-0 operands are scalars and always allowed
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch between shapes {a} and {b}; reshape explicitly")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- gradient rules
# Each rule: (g, out, node) -> tuple of grads, one per parent (None = no grad).


def _vjp_add(g, out, node):
    return g, g


def _vjp_sub(g, out, node):
    return g, -g


def _vjp_mul(g, out, node):
    a, b = node.parents
    return g * b.data, g * a.data


def _vjp_div(g, out, node):
    a, b = node.parents
    gb = -g * a.data / (b.data * b.data)
    return g / b.data, gb


def _vjp_neg(g, out, node):
    return (-g,)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _vjp_matmul(g, out, node):
    a, b = node.parents
    return g @ _swap(b.data), _swap(a.data) @ g


def _vjp_exp(g, out, node):
    return (g * out,)


def _vjp_log(g, out, node):
    return (g / node.parents[0].data,)


def _vjp_sqrt(g, out, node):
    # derivative at 0 is taken as 0 (used by the L2 norm at a perfect fit)
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g / (2.0 * safe), 0.0),)


def _vjp_relu(g, out, node):
    return (g * (node.parents[0].data > 0),)


def _vjp_sigmoid(g, out, node):
    return (g * out * (1.0 - out),)


def _vjp_softplus(g, out, node):
    x = node.parents[0].data
    return (g / (1.0 + np.exp(-np.clip(x, -700, 700))),)


def _vjp_abs(g, out, node):
    return (g * np.sign(node.parents[0].data),)


def _vjp_concat(g, out, node):
    axis = node.attrs["axis"]
    bounds = np.cumsum([0] + [p.shape[axis] for p in node.parents])
    idx = [slice(None)] * g.ndim
    grads = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx[axis] = slice(int(lo), int(hi))
        grads.append(g[tuple(idx)])
    return tuple(grads)


def _vjp_slice(g, out, node):
    (a,) = node.parents
    full = np.zeros_like(a.data)
    if node.attrs["advanced"]:
        np.add.at(full, node.attrs["index"], g)
    else:
        full[node.attrs["index"]] = g
    return (full,)


def _vjp_take(g, out, node):
    (a,) = node.parents
    axis = node.attrs["axis"]
    idx = node.attrs["indices"]
    if axis == 0 and a.ndim == 2:
        # scatter-add as a sparse product; much faster than np.add.at
        flat = idx.reshape(-1)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(a.shape[0], flat.size)
        )
        return (np.asarray(scatter @ g.reshape(flat.size, a.shape[1])),)
    full = np.zeros_like(a.data)
    moved = np.moveaxis(full, axis, 0)
    gm = np.moveaxis(g, axis, 0).reshape((idx.size,) + moved.shape[1:])
    np.add.at(moved, idx.reshape(-1), gm)
    return (full,)


def _vjp_spmm(g, out, node):
    return (np.asarray(node.attrs["matrix"].T @ g),)


def _vjp_reshape(g, out, node):
    return (g.reshape(node.parents[0].shape),)


def _vjp_transpose(g, out, node):
    axes = node.attrs["axes"]
    return (np.transpose(g, np.argsort(axes)),)


def _vjp_broadcast(g, out, node):
    return (_unbroadcast(g, node.parents[0].shape),)


def _expand_reduced(g, node):
    axis = node.attrs["axis"]
    keep = node.attrs["keepdims"]
    shape = node.parents[0].shape
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keep:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _vjp_sum(g, out, node):
    return (np.array(_expand_reduced(g, node)),)


def _vjp_mean(g, out, node):
    shape = node.parents[0].shape
    axis = node.attrs["axis"]
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))
    return (np.array(_expand_reduced(g, node)) / n,)


def _vjp_max(g, out, node):
    x = node.parents[0].data
    axis = node.attrs["axis"]
    m = out if node.attrs["keepdims"] or axis is None else np.expand_dims(out, axis)
    hit = (x == np.reshape(m, m.shape if axis is not None else (1,) * x.ndim)).astype(np.float64)
    # ties share the gradient equally
    hit /= hit.sum(axis=axis, keepdims=True)
    return (hit * _expand_reduced(g, node),)


def _vjp_softmax(g, out, node):
    axis = node.attrs["axis"]
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


GRAD_RULES: Dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sqrt": _vjp_sqrt,
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus,
    "abs": _vjp_abs,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "take": _vjp_take,
    "spmm": _vjp_spmm,
    "reshape": _vjp_reshape,
    "transpose": _vjp_transpose,
    "broadcast": _vjp_broadcast,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "max": _vjp_max,
    "softmax": _vjp_softmax,
}


# ---------------------------------------------------------------- forward ops


def _binary(op: str, a, b, fn) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, op)
    return Tensor._from_op(fn(a.data, b.data), op, (a, b))


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    return Tensor._from_op(a.data / b.data, "div", (a, b))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(-a.data, "neg", (a,))


def matmul(a, b) -> Tensor:
    """Batched matmul; ranks must match (>=2), batch axes follow size-1 expansion."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    return Tensor._from_op(a.data @ b.data, "matmul", (a, b))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return Tensor._from_op(np.log(a.data), "log", (a,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt: negative input")
    return Tensor._from_op(np.sqrt(a.data), "sqrt", (a,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(np.maximum(a.data, 0.0), "relu", (a,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, "sigmoid", (a,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._from_op(out, "softplus", (a,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(np.abs(a.data), "abs", (a,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    return Tensor._from_op(out, "concat", ts, attrs={"axis": axis})


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_(a, index) -> Tensor:
    """Basic or advanced indexing (``a[index]``)."""
    a = _as_tensor(a)
    out = np.array(a.data[index])
    return Tensor._from_op(out, "slice", (a,), attrs={"index": index, "advanced": _is_advanced(index)})


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)
    return Tensor._from_op(out, "take", (a,), attrs={"axis": axis, "indices": idx})


def spmm(matrix, a) -> Tensor:
    """Constant sparse (M, N) matrix times a (N, C) tensor (interpolation stencils)."""
    a = _as_tensor(a)
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: matrix shape {matrix.shape} vs tensor shape {a.shape}")
    out = np.asarray(matrix @ a.data)
    return Tensor._from_op(out, "spmm", (a,), attrs={"matrix": matrix})


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from e
    return Tensor._from_op(out, "reshape", (a,))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(int(x) % a.ndim for x in axes)
    return Tensor._from_op(np.transpose(a.data, axes), "transpose", (a,), attrs={"axes": axes})


def broadcast_to(a, shape) -> Tensor:
    """Expand size-1 axes to ``shape``; ranks must already agree."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}")
    return Tensor._from_op(np.array(np.broadcast_to(a.data, shape)), "broadcast", (a,))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(int(x) % ndim for x in axis)
    return int(axis) % ndim


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return Tensor._from_op(out, "sum", (a,), attrs={"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return Tensor._from_op(out, "mean", (a,), attrs={"axis": axis, "keepdims": keepdims})


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if isinstance(axis, (tuple, list)):
        raise ShapeError("max: reduce over a single axis or all axes")
    axis = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.max(axis=axis, keepdims=keepdims))
    return Tensor._from_op(out, "max", (a,), attrs={"axis": axis, "keepdims": keepdims})


def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-stabilized softmax. ``mask`` marks permitted entries; the rest get exactly 0."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax: scalar input has no axis")
    axis = int(axis) % x.ndim if -x.ndim <= axis < x.ndim else None
    if axis is None:
        raise ShapeError(f"softmax: axis out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has no permitted entries")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._from_op(out, "softmax", (x,), attrs={"axis": axis})


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast_to,
    "transpose": transpose,
    "sqrt": sqrt,
    "max-reduce": max_,
}


def tensor_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch by op kind name, e.g. ``tensor_op("matmul", [a, b])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "slice":
        return fn(inputs[0], kwargs["index"])
    if kind == "broadcast":
        return fn(inputs[0], kwargs["shape"])
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- tape


class Tape:
    """Recorded nodes reachable from an output, in topological order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, int]] = [(out, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if node.node_id in seen:
                    continue
            if i < len(node.parents):
                stack.append((node, i + 1))
                p = node.parents[i]
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, 0))
            else:
                if node.node_id not in seen:
                    seen.add(node.node_id)
                    order.append(node)
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, keep_intermediate: bool = False) -> Dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns node_id -> gradient for leaves (and intermediates when asked).
    Gradients are recomputed from scratch, never accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_output(loss)
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    result: Dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            g = np.zeros_like(node.data)
        if not node.parents:
            node.grad = g
            result[node.node_id] = g
            continue
        if keep_intermediate:
            result[node.node_id] = g
        pgrads = GRAD_RULES[node.op](g, node.data, node)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), p.shape)
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over entries of |g_ad - g_fd| / max(1, |g_fd|) with central differences.

    ``f`` is re-evaluated after perturbing ``params[k].data`` in place.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError("eps must lie in (0, 1e-2]")
    loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    backward(loss)
    worst = 0.0
    for k, p in enumerate(params):
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for sgn in (1.0, -1.0):
                flat[i] = orig + sgn * eps
                try:
                    with no_grad():
                        v = f()
                except NonFiniteError as e:
                    flat[i] = orig
                    raise GradCheckError(f"non-finite f at param {k} entry {i}: {e}", k, i) from e
                if not np.isfinite(v.data).all():
                    flat[i] = orig
                    raise GradCheckError(f"non-finite f at param {k} entry {i}", k, i)
                vals.append(float(v.data.reshape(-1)[0]))
            flat[i] = orig
            g_fd = (vals[0] - vals[1]) / (2 * eps)
            err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


def parameters_grads(params: Iterable[Tensor]) -> List[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
