"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every backward rule is written in terms of :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is itself differentiable. That is
what the gradient-penalty objectives (IRMv1, the ADMM stationarity terms) need.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives non-conformable operands."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = mode
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- broadcasting helpers (bias-add and scalar operands) -------------------

def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``t`` down to ``shape`` (the adjoint of broadcasting)."""
    if t.shape == tuple(shape):
        return t
    lead = t.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and t.shape[i + lead] != 1
    )
    data = t.data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    in_shape = t.shape
    return _make(data, (t,), lambda g: (broadcast_to(g, in_shape),), "sum_to")


def broadcast_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    if t.shape == tuple(shape):
        return t
    in_shape = t.shape
    data = np.broadcast_to(t.data, shape)
    return _make(data, (t,), lambda g: (sum_to(g, in_shape),), "broadcast_to")


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (sum_to(g, sa) if ra else None), (sum_to(g, sb) if rb else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (sum_to(g, sa) if ra else None), (sum_to(-g, sb) if rb else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return (sum_to(g * b, a.shape) if a.requires_grad else None,
                sum_to(g * a, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def backward(g):
        return (sum_to(g / b, a.shape) if a.requires_grad else None,
                sum_to(-g * a / (b * b), b.shape) if b.requires_grad else None)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a Python number")
    if p == 2:
        return mul(a, a)
    return _make(a.data**p, (a,), lambda g: (g * p * a ** (p - 1),), "pow")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", in_shape, tuple(shape)) from None
    return _make(data, (a,), lambda g: (reshape(g, in_shape),), "reshape")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=True)
    kept_shape = data.shape
    if not keepdims:
        data = data.squeeze(axis=axis) if axis is not None else data.reshape(())

    def backward(g):
        return (broadcast_to(reshape(g, kept_shape), in_shape),)

    return _make(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            out.append(take_slice(g, axis, int(lo), int(hi)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def take_slice(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    in_shape = a.shape

    def backward(g):
        pads = [(0, 0)] * len(in_shape)
        pads[axis] = (lo, in_shape[axis] - hi)
        return (pad(g, pads),)

    return _make(a.data[idx], (a,), backward, "slice")


def pad(a: Tensor, pads) -> Tensor:
    idx = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, a.shape))
    return _make(np.pad(a.data, pads), (a,), lambda g: (_index(g, idx),), "pad")


def _index(a: Tensor, idx) -> Tensor:
    in_shape = a.shape
    pads = [(s.start, dim - s.stop) for s, dim in zip(idx, in_shape)]
    return _make(a.data[idx], (a,), lambda g: (pad(g, pads),), "index")


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * out,)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * out * (1.0 - out),)

    out = _make(0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,), backward, "sigmoid")
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sigmoid(a),), "softplus")


def elu(a) -> Tensor:
    """ELU with alpha = 1: ``x`` for ``x > 0``, ``exp(x) - 1`` otherwise."""
    a = as_tensor(a)
    pos = a.data > 0
    neg_mask = (~pos).astype(np.float64)

    def backward(g):
        # on the negative branch elu'(x) = elu(x) + 1
        return (g * (pos + neg_mask * (out + 1.0)),)

    out = _make(np.where(pos, a.data, np.expm1(np.minimum(a.data, 0.0))), (a,), backward, "elu")
    return out


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax; the max shift is a constant so the result stays smooth."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("log_softmax", a.shape)
    shifted = a - Tensor(a.data.max(axis=1, keepdims=True))
    return shifted - log(tsum(exp(shifted), axis=1, keepdims=True))


# -- losses ------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` [n, k] against integer ``labels`` [n]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -tsum(log_softmax(logits) * onehot) * (1.0 / labels.size)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of a single logit column against 0/1 targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    return mean(softplus(logits) - logits * y)


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    d = pred - target
    return mean(d * d)


def sq_norm(a) -> Tensor:
    a = as_tensor(a)
    return tsum(a * a)


def dropout(a, p_drop: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; ``p_drop`` is the probability of zeroing a unit."""
    if not train or p_drop <= 0.0:
        return a
    if p_drop >= 1.0:
        return a * 0.0
    keep = 1.0 - p_drop
    mask = (rng.random(a.shape) < keep).astype(np.float64) / keep
    return a * mask


# -- graph traversal ---------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""

    root: Tensor
    order: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(root, order)

    def relevant_to(self, targets: Iterable[Tensor]) -> set[int]:
        """Ids of nodes with a path to any of ``targets``."""
        marked = {id(t) for t in targets}
        for node in self.order:
            if id(node) not in marked and any(id(p) in marked for p in node._parents):
                marked.add(id(node))
        return marked


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         check_finite: bool = True) -> list[Tensor]:
    """Return d root / d input for each input; unused inputs get exact zeros."""
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if check_finite and not np.isfinite(root.data).all():
        raise NonFiniteError(f"non-finite root value {root.data}")
    grads: dict[int, Tensor] = {}
    keep = {id(t) for t in inputs}
    if root.requires_grad:
        graph = Graph.trace(root)
        live = graph.relevant_to(inputs)
        grads[id(root)] = Tensor(np.ones(root.shape))
        with set_grad_enabled(create_graph):
            for node in reversed(graph.order):
                if node._backward is None or id(node) not in live:
                    continue
                g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
                if g is None:
                    continue
                parents = node._parents
                pgs = node._backward(g)
                for parent, pg in zip(parents, pgs):
                    if pg is None or id(parent) not in live:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif check_finite and not np.isfinite(g.data).all():
            raise NonFiniteError(f"non-finite gradient for {t.name or t}")
        out.append(g)
    return out


def value_and_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]):
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return value and gradients."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    return out.item(), [g.data for g in grad(out, leaves)]
