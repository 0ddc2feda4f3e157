"""Minimal float64 tensor with a dynamic reverse-mode tape.

Only the operations needed by the cosine-similarity classifier, the attacks
and the fine-tuning objectives are provided. Every result that depends on a
tensor with ``requires_grad=True`` records its parents and a closure that maps
the upstream gradient to parent gradients; :func:`backward` walks that tape
once in reverse topological order and then releases it.

Example
-------
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> backward((x * x).sum())
>>> x.grad
array([2., 4., 6.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, GraphConsumedError, NumericError

KL_FLOOR = 1e-12
NORM_EPS = 1e-12


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable, op: str):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out._op = op
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no gradient path."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a = self.data
        e = float(exponent)

        def bw(g):
            return (g * e * a ** (e - 1.0),)

        return Tensor._make(a ** e, (self,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    # -- reductions / unary ops as methods ------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


# -- free functions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    a = x.data
    if np.any(a <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._make(np.log(a), (x,), lambda g: (g / a,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sqrt(x: Tensor) -> Tensor:
    a = x.data
    if np.any(a < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient passes only where x > floor."""
    a = x.data
    mask = a > floor
    return Tensor._make(np.where(mask, a, floor), (x,), lambda g: (g * mask,), "clamp_min")


def max_rows(x: Tensor) -> Tensor:
    """Row maximum of a 2-D tensor. Ties route the gradient to the lowest index."""
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"max_rows expects a non-empty 2-D tensor, got {x.shape}")
    idx = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return Tensor._make(x.data[rows, idx], (x,), bw, "max_rows")


def gather_rows(x: Tensor, index) -> Tensor:
    """out[i] = x[i, index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"gather_rows: tensor {x.shape} vs index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise DomainError("gather index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return Tensor._make(x.data[rows, index], (x,), bw, "gather_rows")


def _check_rows(x: Tensor, name: str) -> None:
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DimensionError(f"{name} expects a non-empty [B x C] tensor, got shape {x.shape}")


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting the row maximum."""
    _check_rows(logits, "softmax_rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._make(p, (logits,), bw, "softmax_rows")


def log_softmax_rows(logits: Tensor) -> Tensor:
    _check_rows(logits, "log_softmax_rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._make(out, (logits,), bw, "log_softmax_rows")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row. The gradient at a zero row is taken as 0."""
    if x.ndim != 2:
        raise DimensionError(f"row_norm expects a 2-D tensor, got {x.shape}")
    a = x.data
    n = np.sqrt((a * a).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        return (np.where((n > 0)[:, None], a * (g / safe)[:, None], 0.0),)

    return Tensor._make(n, (x,), bw, "row_norm")


def normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """x_i / max(||x_i||, eps)."""
    n = clamp_min(row_norm(x), eps)
    return x / n.reshape(-1, 1)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` [B x D] and ``b`` [C x D]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_similarity: {a.shape} vs {b.shape}")
    return matmul(normalize_rows(a, eps), normalize_rows(b, eps).T)


def check_row_stochastic(p: np.ndarray, tol: float = 1e-6, name: str = "p") -> None:
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise DomainError(f"{name} is not row-stochastic within {tol}")


def kl_divergence_rows(p: Tensor, q: Tensor, floor: float = KL_FLOOR) -> Tensor:
    """Per-row KL(p_i || q_i) with a probability floor inside both logarithms."""
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence_rows: shapes differ, {p.shape} vs {q.shape}")
    _check_rows(p, "kl_divergence_rows")
    check_row_stochastic(p.data, name="p")
    check_row_stochastic(q.data, name="q")
    terms = p * (log(clamp_min(p, floor)) - log(clamp_min(q, floor)))
    return terms.sum(axis=1)


# -- the tape -----------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The tape is released afterwards; calling backward on the same root again
    raises :class:`GraphConsumedError`.
    """
    if root._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor with requires_grad=True")

    order = _topological(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise DomainError("step h must be positive")
    base = np.array(_as_array(x), dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate(arr):
        val = f(Tensor(arr.reshape(base.shape)))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NumericError("non-finite function value during finite differencing")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(flat.copy())
        flat[i] = orig - h
        down = evaluate(flat.copy())
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))
