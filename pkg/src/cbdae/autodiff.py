"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity is a :class:`Tensor`. Operations on tensors that
require gradients record a node holding their parents and a backward closure;
:func:`backward` walks that graph once in reverse topological order. The graph
is rebuilt on every forward pass, so data-dependent branching (such as the
scheduled-sampling decoder) needs no special handling.

Conventions: ``relu'(0) = 0``, ``|x|'(0) = 0`` and the gradient of the L2 norm
at the zero vector is zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "make_op",
    "backward",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "absolute",
    "exp",
    "log",
    "div",
    "add_bias",
    "tsum",
    "mean",
    "l2norm",
    "dot",
    "transpose",
    "stack",
    "concat",
    "where",
    "normalize_columns",
    "logsumexp_masked",
    "elementwise",
    "reduction",
    "finite_difference_grad",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array with an optional gradient slot and graph linkage."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf"):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``values`` as the output of an operation.

    ``backward_fn`` receives the upstream gradient and returns one gradient per
    parent (``None`` for parents that do not require one). When no parent
    requires a gradient the result is a plain constant and nothing is recorded.
    """
    out = Tensor.__new__(Tensor)
    out.values = values
    out.op = op
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` for ``a`` of shape (m, k) and ``b`` of (k, n) or (k,)."""
    if a.values.ndim != 2 or b.values.ndim not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        if b.requires_grad:
            gb = av.T @ g
        return ga, gb

    return make_op(av @ bv, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return make_op(a.values.T, (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    av, bv = a.values, b.values
    return make_op(av * bv, (a, b), lambda g: (g * bv, g * av), "hadamard")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return make_op(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.values * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.values)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(x / 2)) never overflows, unlike 1 / (1 + exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return make_op(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.values)
    return make_op(np.abs(a.values), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.values
    return make_op(np.log(av), (a,), lambda g: (g / av,), "log")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add the vector ``b`` (m,) to every column of ``x`` (m, n)."""
    if b.values.ndim != 1 or x.shape[0] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    if x.values.ndim == 1:
        return add(x, b)
    return make_op(x.values + b.values[:, None], (x, b), lambda g: (g, g.sum(axis=1)), "add_bias")


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``cond`` holds and ``b`` elsewhere (``cond`` is constant)."""
    _same_shape(a, b, "where")
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return make_op(
        np.where(cond, a.values, b.values),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        "where",
    )


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "scale": scale,
    "abs": absolute,
}


def elementwise(op: str, *args):
    """Dispatch one of ``add, sub, hadamard, sigmoid, tanh, relu, scale, abs``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return make_op(np.asarray(a.values.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def l2norm(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ContractError("l2norm of an empty tensor")
    av = a.values
    norm = float(np.sqrt(np.sum(av * av)))

    def grad_fn(g):
        if norm == 0.0:
            return (np.zeros_like(av),)
        return (float(g) * av / norm,)

    return make_op(np.asarray(norm), (a,), grad_fn, "l2norm")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: needs equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return make_op(np.asarray(av @ bv), (a, b), lambda g: (float(g) * bv, float(g) * av), "dot")


_REDUCTIONS = {"sum": tsum, "mean": mean, "l2norm": l2norm, "dot": dot}


def reduction(op: str, *args) -> Tensor:
    """Dispatch one of ``sum, mean, l2norm, dot``."""
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def grad_fn(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_op(a.values[index], (a,), grad_fn, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack of nothing")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise DimensionError(f"stack: shape mismatch {first} vs {t.shape}")
    out = np.stack([t.values for t in tensors], axis=axis)

    def grad_fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return make_op(out, tensors, grad_fn, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return np.split(g, cuts, axis=axis)

    return make_op(out, tensors, grad_fn, "concat")


# ---------------------------------------------------------------------------
# fused helpers for the contrastive loss


def normalize_columns(z: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each column of ``z`` to unit L2 norm; columns with norm < eps become zero."""
    if z.values.ndim != 2:
        raise DimensionError(f"normalize_columns needs a matrix, got {z.shape}")
    zv = z.values
    norms = np.sqrt(np.sum(zv * zv, axis=0))
    live = norms >= eps
    safe = np.where(live, norms, 1.0)
    out = np.where(live, zv / safe, 0.0)

    def grad_fn(g):
        proj = np.sum(out * g, axis=0)
        return (np.where(live, (g - out * proj) / safe, 0.0),)

    return make_op(out, (z,), grad_fn, "normalize_columns")


def logsumexp_masked(x: Tensor, mask) -> Tensor:
    """Row-wise ``log(sum(exp(x[i, mask[i]])))`` for a matrix ``x``.

    Every row must keep at least one entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.values.ndim != 2 or mask.shape != x.shape:
        raise DimensionError(f"logsumexp_masked: {x.shape} with mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("logsumexp_masked: a row has no unmasked entry")
    xv = np.where(mask, x.values, -np.inf)
    top = xv.max(axis=1, keepdims=True)
    w = np.exp(xv - top)
    total = w.sum(axis=1, keepdims=True)
    out = (top + np.log(total))[:, 0]
    soft = w / total

    return make_op(out, (x,), lambda g: (soft * g[:, None],), "logsumexp_masked")


# ---------------------------------------------------------------------------
# oracle


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the scalar ``fn()`` w.r.t. ``param``.

    ``fn`` must rebuild its result from ``param.values`` on every call.
    """
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad
