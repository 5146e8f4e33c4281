"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive builds its output eagerly and, when any input takes part in
differentiation, attaches a closure that maps the output gradient to input
gradients. ``backward`` orders the graph topologically into a :class:`Tape`
and walks it once in reverse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-12


class NonFiniteError(ValueError):
    """A tensor value became NaN or infinite."""


class ShapeError(ValueError):
    pass


class ZeroVectorWarning(RuntimeWarning):
    """A cosine similarity was taken against a (near) zero vector."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array that can record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by {op!r}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


@dataclass
class Tape:
    """Nodes of one graph in topological order (parents before children)."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.sum(g).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_or_scalar(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_or_scalar(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_or_scalar(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_ELEMENTWISE_UNARY = {"relu": relu, "log": log, "exp": exp}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, kind: str, other=None) -> Tensor:
    """Dispatch by name: relu/log/exp take one operand, add/sub/mul two, scale a float."""
    if kind in _ELEMENTWISE_UNARY:
        return _ELEMENTWISE_UNARY[kind](_wrap(a))
    if kind in _ELEMENTWISE_BINARY:
        return _ELEMENTWISE_BINARY[kind](a, other)
    if kind == "scale":
        return scale(_wrap(a), other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and structure


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), grad_fn, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with numpy indexing semantics; repeated indices accumulate."""
    out = np.array(a.data[index], dtype=np.float64)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), grad_fn, "take")


def stack(items: Sequence[Tensor]) -> Tensor:
    items = [_wrap(t) for t in items]
    if not items:
        raise ShapeError("stack of nothing")
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    return _make(np.stack([t.data for t in items]), items, lambda g: tuple(g[i] for i in range(len(items))), "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias row added to every row of the product."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ weight.data
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g), "linear")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    with np.errstate(over="ignore", invalid="ignore"):
        out = out + bias.data
    return _make(out, (x, weight, bias), lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)), "linear")


# ---------------------------------------------------------------------------
# similarity and distributions


def _row_norms(m: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    raw = np.sqrt(np.sum(m * m, axis=1))
    return np.maximum(raw, eps), raw > eps


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Matrix of cosine similarities between the rows of ``a`` and the rows of ``b``.

    Norms are clamped below at ``eps`` so a zero row gives similarity 0.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: incompatible shapes {a.shape}, {b.shape}")
    na, a_live = _row_norms(a.data, eps)
    nb, b_live = _row_norms(b.data, eps)
    if not (a_live.all() and b_live.all()):
        warnings.warn("cosine similarity against a zero vector", ZeroVectorWarning, stacklevel=2)
    an = a.data / na[:, None]
    bn = b.data / nb[:, None]
    out = np.clip(an @ bn.T, -1.0, 1.0)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            d_an = g @ bn
            proj = np.where(a_live, np.sum(d_an * an, axis=1), 0.0)
            ga = (d_an - an * proj[:, None]) / na[:, None]
        if b.requires_grad:
            d_bn = g.T @ an
            proj = np.where(b_live, np.sum(d_bn * bn, axis=1), 0.0)
            gb = (d_bn - bn * proj[:, None]) / nb[:, None]
        return ga, gb

    return _make(out, (a, b), grad_fn, "pairwise_cosine")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """a·b / (max(|a|, eps) · max(|b|, eps)) for two equal-length vectors."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {a.shape}, {b.shape}")
    d = a.shape[0]
    return reshape(pairwise_cosine(reshape(a, (1, d)), reshape(b, (1, d)), eps), ())


def softmax(v: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``v / temperature`` along the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = _wrap(v)
    if v.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = v.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)) / temperature,)

    return _make(out, (v,), grad_fn, "softmax")


def log_softmax(v: Tensor, temperature: float = 1.0) -> Tensor:
    """log(softmax(v / temperature)) along the last axis, via log-sum-exp."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = _wrap(v)
    z = v.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def grad_fn(g):
        return ((g - probs * np.sum(g, axis=-1, keepdims=True)) / temperature,)

    return _make(out, (v,), grad_fn, "log_softmax")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) summed over the last axis, with 0·log(0/q) taken as 0.

    Rows of a matrix input give one divergence each. Raises when q is zero
    where p is positive.
    """
    p, q = _wrap(p), _wrap(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise ValueError("kl_divergence: negative probability")
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        raise ValueError("kl_divergence: q is zero where p is positive (infinite divergence)")
    safe_p = np.where(support, p.data, 1.0)
    safe_q = np.where(support, q.data, 1.0)
    log_ratio = np.where(support, np.log(safe_p) - np.log(safe_q), 0.0)
    out = np.sum(p.data * log_ratio, axis=-1)

    def grad_fn(g):
        g = np.expand_dims(g, -1)
        gp = g * np.where(support, log_ratio + 1.0, 0.0)
        gq = -g * np.where(support, safe_p / safe_q, 0.0)
        return gp, gq

    return _make(np.asarray(out, dtype=np.float64), (p, q), grad_fn, "kl_divergence")
