"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the Transformer/CAMO graph are provided. There
is no general broadcasting: binary elementwise ops require equal shapes, with
two exceptions (``add_bias`` over the last dimension and constant additive
masks that are pre-broadcast by the caller).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised as soon as an op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (generation, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite value produced")
    arr.flags.writeable = False
    return arr


class Tensor:
    """A node of the differentiation graph.

    ``data`` is read-only; ops build new tensors and never mutate inputs.
    Leaves created with ``requires_grad=True`` accumulate ``grad`` on
    :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = "leaf", _copy=True):
        arr = np.array(data, dtype=np.float64, copy=True) if _copy else data
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.op = _op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def assign(self, values: np.ndarray) -> None:
        """Replace a leaf's values in place of the buffer (optimizer updates)."""
        if not self.is_leaf:
            raise GraphError("only leaves can be reassigned")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise DimensionError(f"assign shape {values.shape} != {self.shape}")
        self.data = _frozen(values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != tuple(shape):
        if arr.ndim == 0:
            arr = np.full(shape, float(arr))
        else:
            raise DimensionError(f"shape {arr.shape} does not match {tuple(shape)}")
    return Tensor(arr)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op, _copy=False)
    return Tensor(out, _op=op, _copy=False)


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """Topologically ordered view of the graph feeding a tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.id not in seen:
                    stack.append((parent, False))
        return cls(order)

    def records(self) -> list[OpRecord]:
        return [OpRecord(n.op, tuple(p.id for p in n._parents), n.id) for n in self.nodes if n._parents]


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite gradient in {node.op}")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    if not retain_graph:
        for node in graph.nodes:
            if not node.is_leaf:
                node._backward = None
                node._consumed = True
        loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a scalar; ``s`` may be a float or a 1-element tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise DimensionError(f"scale factor must have one element, got {s.shape}")
        sv = float(s.data.reshape(()))
        xd = x.data
        return _make(
            sv * xd,
            (x, s),
            lambda g: (g * sv, np.full(s.shape, float((g * xd).sum()))),
            "scale",
        )
    sv = float(s)
    return _make(sv * x.data, (x,), lambda g: (g * sv,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast over every axis but the last."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias shape {b.shape} incompatible with {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    factor = np.where(pos, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------------------
# reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g.item()),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g.item() / n),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; every other dimension must agree."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, batched ``[B,m,k] @ [B,k,n]`` with equal batch
    dimensions, and ``[B,m,k] @ [k,n]`` (a shared weight matrix).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = ad @ bd
    shared = bd.ndim == 2 and ad.ndim > 2

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# normalisation / probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtracted before exponentiation)."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last dimension, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# indexing


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``weight`` (shape ``[V, d]``)."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def grad_fn(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, idx, g)
        return (gw,)

    return _make(weight.data[idx], (weight,), grad_fn, "embedding")


def pick(x: Tensor, cols: Sequence[int]) -> Tensor:
    """Return ``x[t, cols[t]]`` for each row ``t`` of a 2-d tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick expects [T, V] and T indices, got {x.shape} and {cols.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        gx[rows, cols] = g
        return (gx,)

    return _make(x.data[rows, cols], (x,), grad_fn, "pick")


def select_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Keep the listed rows (axis 0) of ``x``."""
    idx = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), grad_fn, "select_rows")


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. the leaf ``param``."""
    base = param.data.copy()
    out = np.zeros(base.shape)
    flat = out.reshape(-1)
    for i in range(base.size):
        pert = base.copy().reshape(-1)
        pert[i] += eps
        param.data = _frozen(pert.reshape(base.shape).copy())
        with no_grad():
            up = fn().item()
        pert[i] -= 2 * eps
        param.data = _frozen(pert.reshape(base.shape).copy())
        with no_grad():
            down = fn().item()
        flat[i] = (up - down) / (2 * eps)
    param.data = _frozen(base)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> dict[int, float]:
    """Compare analytic and numeric gradients; returns relative error per param index."""
    for p in params:
        p.zero_grad()
    fn().backward()
    errors = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        errors[i] = relative_error(analytic, numerical_grad(fn, p, eps))
    return errors
