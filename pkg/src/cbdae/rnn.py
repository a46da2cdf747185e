"""GRU layers and the stacked recurrent encoder.

Gate weights of a layer are stored stacked in ``z, r, n`` order: ``W`` is
``(3Q, P)``, ``U`` is ``(3Q, Q)`` and ``b`` is ``(3Q,)``. The cell follows the
standard GRU update::

    z = sigmoid(W_z p + U_z h + b_z)
    r = sigmoid(W_r p + U_r h + b_r)
    n = tanh(W_n p + r * (U_n h + b_n))
    h' = (1 - z) * n + z * h

The training path runs through fused autodiff ops (:func:`gru_cell`,
:func:`gru_sequence`). The inference path (:func:`infer_cell`) works on
``(batch, features)`` rows and multiplies each row separately, so a window's
result does not depend on which other windows share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, make_op, stack
from .errors import ContractError, DimensionError

GATES = ("z", "r", "n")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruLayerParams:
    """Weights of one GRU layer (stacked ``z, r, n`` gate blocks)."""

    W: Tensor
    U: Tensor
    b: Tensor

    def __post_init__(self):
        q3 = self.U.shape[0]
        if q3 % 3 or self.U.shape != (q3, q3 // 3):
            raise DimensionError(f"U must be (3Q, Q), got {self.U.shape}")
        if self.W.values.ndim != 2 or self.W.shape[0] != q3:
            raise DimensionError(f"W must be (3Q, P) with 3Q={q3}, got {self.W.shape}")
        if self.b.shape != (q3,):
            raise DimensionError(f"b must be ({q3},), got {self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> GruLayerParams:
        """Uniform initialisation in ``[-1/sqrt(Q), 1/sqrt(Q)]``."""
        bound = 1.0 / np.sqrt(hidden_size)
        q3 = 3 * hidden_size
        W = rng.uniform(-bound, bound, size=(q3, input_size))
        U = rng.uniform(-bound, bound, size=(q3, hidden_size))
        b = rng.uniform(-bound, bound, size=q3)
        return cls(Tensor(W, True), Tensor(U, True), Tensor(b, True))

    @classmethod
    def from_gates(cls, **blocks) -> GruLayerParams:
        """Build from the nine named blocks ``W_z, W_r, W_n, U_z, ..., b_n``."""
        W = np.concatenate([blocks[f"W_{g}"] for g in GATES], axis=0)
        U = np.concatenate([blocks[f"U_{g}"] for g in GATES], axis=0)
        b = np.concatenate([blocks[f"b_{g}"] for g in GATES], axis=0)
        return cls(Tensor(W, True), Tensor(U, True), Tensor(b, True))

    def gates(self) -> dict[str, np.ndarray]:
        """Views of the nine gate blocks keyed ``W_z`` ... ``b_n``."""
        q = self.hidden_size
        out = {}
        for i, g in enumerate(GATES):
            rows = slice(i * q, (i + 1) * q)
            out[f"W_{g}"] = self.W.values[rows]
            out[f"U_{g}"] = self.U.values[rows]
            out[f"b_{g}"] = self.b.values[rows]
        return out

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "U": self.U, "b": self.b}


@dataclass
class GruStack:
    layers: list[GruLayerParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a GRU stack needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.input_size != prev.hidden_size:
                raise DimensionError(
                    f"layer input {nxt.input_size} does not match previous hidden size {prev.hidden_size}"
                )

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.hidden_size for layer in self.layers]

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    def __len__(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, input_size: int, hidden_sizes: list[int], rng: np.random.Generator) -> GruStack:
        layers = []
        p = input_size
        for q in hidden_sizes:
            layers.append(GruLayerParams.init(p, q, rng))
            p = q
        return cls(layers)


# ---------------------------------------------------------------------------
# fused kernels


def _cell_forward(W, U, b, p, h):
    q = U.shape[1]
    gx = W @ p
    gh = U @ h + (b if h.ndim == 1 else b[:, None])
    z = _sigmoid(gx[:q] + gh[:q])
    r = _sigmoid(gx[q : 2 * q] + gh[q : 2 * q])
    n = np.tanh(gx[2 * q :] + r * gh[2 * q :])
    h_new = (1.0 - z) * n + z * h
    return h_new, (z, r, n, gh[2 * q :])


def _cell_backward(g, U, h, cache):
    """Return (d pre-activations of W p, of U h + b, and the direct d h)."""
    z, r, n, ghn = cache
    dz = g * (h - n)
    dn = g * (1.0 - z)
    dn_pre = dn * (1.0 - n * n)
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dn_pre * ghn * r * (1.0 - r)
    dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=0)
    dgh = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=0)
    dh = g * z + U.T @ dgh
    return dgx, dgh, dh


def _check_cell_shapes(layer: GruLayerParams, p: Tensor, h: Tensor) -> None:
    if p.shape[0] != layer.input_size or h.shape[0] != layer.hidden_size:
        raise DimensionError(
            f"gru cell expects p[{layer.input_size}], h[{layer.hidden_size}], got {p.shape} and {h.shape}"
        )
    if p.values.ndim != h.values.ndim or p.shape[1:] != h.shape[1:]:
        raise DimensionError(f"gru cell: batch layout differs {p.shape} vs {h.shape}")


def gru_cell(layer: GruLayerParams, p: Tensor, h: Tensor) -> Tensor:
    """One fused GRU step; ``p`` is (P,) or (P, B) and ``h`` is (Q,) or (Q, B)."""
    _check_cell_shapes(layer, p, h)
    W, U, b = layer.W, layer.U, layer.b
    pv, hv = p.values, h.values
    h_new, cache = _cell_forward(W.values, U.values, b.values, pv, hv)

    def grad_fn(g):
        dgx, dgh, dh = _cell_backward(g, U.values, hv, cache)
        if pv.ndim == 1:
            dW, dU, db = np.outer(dgx, pv), np.outer(dgh, hv), dgh
        else:
            dW, dU, db = dgx @ pv.T, dgh @ hv.T, dgh.sum(axis=1)
        dp = W.values.T @ dgx if p.requires_grad else None
        return dp, dh, dW, dU, db

    return make_op(h_new, (p, h, W, U, b), grad_fn, "gru_cell")


def gru_cell_step(layer: GruLayerParams, p: Tensor, h_prev: Tensor) -> Tensor:
    """Single GRU update for one layer."""
    return gru_cell(layer, p, h_prev)


def gru_sequence(layer: GruLayerParams, xs: Tensor, h0: Tensor) -> Tensor:
    """Run a layer over a whole input sequence ``xs`` of shape (T, P[, B]).

    Returns the hidden-state sequence of shape (T, Q[, B]) as a single node.
    """
    if xs.values.ndim < 2 or xs.shape[0] == 0:
        raise ContractError(f"gru_sequence needs a non-empty (T, P[, B]) input, got {xs.shape}")
    steps = xs.shape[0]
    W, U, b = layer.W, layer.U, layer.b
    Wv, Uv, bv = W.values, U.values, b.values
    _check_cell_shapes(layer, _Shape(xs.values[0]), _Shape(h0.values))
    xv = xs.values
    hs = np.empty((steps,) + h0.shape)
    caches = []
    h = h0.values
    for j in range(steps):
        h, cache = _cell_forward(Wv, Uv, bv, xv[j], h)
        hs[j] = h
        caches.append(cache)
    h_prev = np.concatenate([h0.values[None], hs[:-1]], axis=0)

    def grad_fn(g):
        dgx_all = np.empty((steps, 3 * layer.hidden_size) + h0.shape[1:])
        dgh_all = np.empty_like(dgx_all)
        carry = np.zeros_like(h0.values)
        for j in range(steps - 1, -1, -1):
            dgx, dgh, carry = _cell_backward(g[j] + carry, Uv, h_prev[j], caches[j])
            dgx_all[j] = dgx
            dgh_all[j] = dgh
        if xv.ndim == 2:
            dW = dgx_all.T @ xv
            dU = dgh_all.T @ h_prev
            db = dgh_all.sum(axis=0)
            dx = dgx_all @ Wv if xs.requires_grad else None
        else:
            dW = np.tensordot(dgx_all, xv, axes=([0, 2], [0, 2]))
            dU = np.tensordot(dgh_all, h_prev, axes=([0, 2], [0, 2]))
            db = dgh_all.sum(axis=(0, 2))
            dx = np.matmul(Wv.T, dgx_all) if xs.requires_grad else None
        return dx, carry, dW, dU, db

    return make_op(hs, (xs, h0, W, U, b), grad_fn, "gru_sequence")


class _Shape:
    """Shape-only stand-in used for validation."""

    __slots__ = ("values", "shape")

    def __init__(self, values):
        self.values = values
        self.shape = values.shape


def encode(stack_: GruStack, window, h0: list[Tensor] | None = None):
    """Run the stacked encoder over a window.

    ``window`` is (T, N) for one window or (T, N, B) for a batch (time-major).
    Returns ``(finals, top)``: the final state of every layer and the full
    state sequence of the top layer, shape (T, Q_L[, B]).
    """
    xs = window if isinstance(window, Tensor) else Tensor(window)
    if xs.values.ndim not in (2, 3) or xs.shape[0] == 0:
        raise ContractError(f"encode needs a non-empty (T, N[, B]) window, got {xs.shape}")
    if xs.shape[1] != stack_.input_size:
        raise DimensionError(f"window has {xs.shape[1]} channels, encoder expects {stack_.input_size}")
    batch = xs.shape[2:]
    if h0 is None:
        h0 = [Tensor(np.zeros((q,) + batch)) for q in stack_.hidden_sizes]
    finals = []
    seq = xs
    for layer, h_init in zip(stack_.layers, h0):
        seq = gru_sequence(layer, seq, h_init)
        finals.append(seq[seq.shape[0] - 1])
    return finals, seq


def encode_stepwise(stack_: GruStack, window, h0: list[Tensor] | None = None):
    """Reference encoder that interleaves layers step by step with :func:`gru_cell_step`."""
    xs = window if isinstance(window, Tensor) else Tensor(window)
    batch = xs.shape[2:]
    states = h0 or [Tensor(np.zeros((q,) + batch)) for q in stack_.hidden_sizes]
    top = []
    for j in range(xs.shape[0]):
        p = xs[j]
        new_states = []
        for layer, h in zip(stack_.layers, states):
            p = gru_cell_step(layer, p, h)
            new_states.append(p)
        states = new_states
        top.append(p)
    return states, stack(top)


# ---------------------------------------------------------------------------
# inference kernel (rows are windows)


def _rowwise(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    # one matrix-vector product per row; results are independent of batch size
    return np.matmul(M, x[..., None])[..., 0]


def infer_cell(W: np.ndarray, U: np.ndarray, b: np.ndarray, p: np.ndarray, h: np.ndarray) -> np.ndarray:
    """GRU step on row-major batches ``p`` (B, P) and ``h`` (B, Q)."""
    q = U.shape[1]
    gx = _rowwise(W, p)
    gh = _rowwise(U, h) + b
    z = _sigmoid(gx[:, :q] + gh[:, :q])
    r = _sigmoid(gx[:, q : 2 * q] + gh[:, q : 2 * q])
    n = np.tanh(gx[:, 2 * q :] + r * gh[:, 2 * q :])
    return (1.0 - z) * n + z * h


def infer_encode(stack_: GruStack, windows: np.ndarray) -> list[np.ndarray]:
    """Final states per layer for ``windows`` of shape (B, T, N)."""
    count, steps, _ = windows.shape
    states = [np.zeros((count, q)) for q in stack_.hidden_sizes]
    params = [(l.W.values, l.U.values, l.b.values) for l in stack_.layers]
    for j in range(steps):
        p = windows[:, j, :]
        for i, (W, U, b) in enumerate(params):
            p = infer_cell(W, U, b, p, states[i])
            states[i] = p
    return states
