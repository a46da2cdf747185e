"""The recurrent denoising autoencoder.

Windows travel through the graph path time-major, ``(T, N, B)``; the
inference path takes row-major batches ``(B, T, N)``. All values inside the
network are normalised per channel with the constants stored in
:class:`Normalizer`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .rnn import GruStack, _rowwise, encode, gru_cell, infer_cell, infer_encode


@dataclass(frozen=True)
class ModelArch:
    """Architecture descriptor stored alongside the weights."""

    n_channels: int
    window: int
    hidden: tuple[int, ...] = (80, 80)
    proj_dim: int | None = 20
    head_inner: int | None = None
    channel_names: tuple[str, ...] = ()
    input_channels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_channels < 1 or self.window < 1 or not self.hidden:
            raise ContractError(f"invalid architecture {self}")
        if self.channel_names and len(self.channel_names) != self.n_channels:
            raise ContractError("channel_names must name every channel")

    @property
    def has_head(self) -> bool:
        return self.proj_dim is not None

    @property
    def latent_dim(self) -> int:
        return self.hidden[-1]

    @property
    def inner_dim(self) -> int:
        return self.head_inner or self.hidden[-1]

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "window": self.window,
            "hidden": list(self.hidden),
            "proj_dim": self.proj_dim,
            "head_inner": self.head_inner,
            "channel_names": list(self.channel_names),
            "input_channels": list(self.input_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelArch:
        return cls(
            n_channels=int(d["n_channels"]),
            window=int(d["window"]),
            hidden=tuple(int(q) for q in d["hidden"]),
            proj_dim=None if d.get("proj_dim") is None else int(d["proj_dim"]),
            head_inner=None if d.get("head_inner") is None else int(d["head_inner"]),
            channel_names=tuple(d.get("channel_names", ())),
            input_channels=tuple(int(i) for i in d.get("input_channels", ())),
        )


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> Normalizer:
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, n: int) -> Normalizer:
        return cls(np.zeros(n), np.ones(n))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class TimeWindow:
    """An ``N x T`` measurement window; column ``k`` is the sample at ``n - T + k``."""

    matrix: np.ndarray
    channel_names: tuple[str, ...] = ()
    input_channels: tuple[int, ...] = ()

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] == 0:
            raise ContractError(f"a window is an N x T matrix, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ContractError("window holds non-finite values")

    @property
    def n_channels(self) -> int:
        return self.matrix.shape[0]

    @property
    def depth(self) -> int:
        return self.matrix.shape[1]


@dataclass
class CbdaeParams:
    encoder: GruStack
    decoder: GruStack
    W_out: Tensor
    b_out: Tensor
    W_g1: Tensor | None = None
    W_g2: Tensor | None = None

    def __post_init__(self):
        if self.encoder.hidden_sizes != self.decoder.hidden_sizes:
            raise DimensionError(
                f"decoder sizes {self.decoder.hidden_sizes} must equal encoder sizes {self.encoder.hidden_sizes}"
            )

    @classmethod
    def init(cls, arch: ModelArch, rng: np.random.Generator) -> CbdaeParams:
        hidden = list(arch.hidden)
        q = arch.latent_dim
        encoder = GruStack.init(arch.n_channels, hidden, rng)
        decoder = GruStack.init(arch.n_channels, hidden, rng)
        bound = 1.0 / np.sqrt(q)
        W_out = Tensor(rng.uniform(-bound, bound, size=(arch.n_channels, q)), True)
        b_out = Tensor(rng.uniform(-bound, bound, size=arch.n_channels), True)
        # head drawn last so variants with and without it share every other weight
        W_g1 = W_g2 = None
        if arch.has_head:
            g1 = arch.inner_dim
            W_g1 = Tensor(rng.uniform(-bound, bound, size=(g1, q)), True)
            W_g2 = Tensor(rng.uniform(-1 / np.sqrt(g1), 1 / np.sqrt(g1), size=(arch.proj_dim, g1)), True)
        return cls(encoder, decoder, W_out, b_out, W_g1, W_g2)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part, stack_ in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(stack_.layers):
                for name, t in layer.tensors().items():
                    out[f"{part}.{i}.{name}"] = t
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        if self.W_g1 is not None:
            out["W_g1"] = self.W_g1
            out["W_g2"] = self.W_g2
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.named_tensors().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.named_tensors().items():
            t.values[...] = snap[k]


# ---------------------------------------------------------------------------
# graph-path operations


def project_latent(params: CbdaeParams, h_T: Tensor) -> Tensor:
    """``W_g2 relu(W_g1 h)``; accepts (Q,) or (Q, B)."""
    if params.W_g1 is None:
        raise ContractError("this model has no projection head")
    return ad.matmul(params.W_g2, ad.relu(ad.matmul(params.W_g1, h_T)))


def _output(params: CbdaeParams, d_top: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(params.W_out, d_top), params.b_out)


def decode(params: CbdaeParams, h_states, targets, p_d: float, rng: np.random.Generator | None = None) -> Tensor:
    """Reconstruct a window from the encoder's final states.

    ``targets`` is time-major (T, N[, B]). At step ``j`` the decoder is fed its
    own previous estimate with probability ``p_d`` and the previous target
    otherwise; the first step is fed a zero vector. Returns (T, N[, B]).
    """
    if not 0.0 <= p_d <= 1.0:
        raise ContractError(f"p_d must lie in [0, 1], got {p_d}")
    tv = targets.values if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    steps, n = tv.shape[0], tv.shape[1]
    batch = tv.shape[2:]
    mixing = 0.0 < p_d < 1.0
    if mixing and rng is None:
        raise ContractError("a random generator is needed when 0 < p_d < 1")
    states = list(h_states)
    prev = None
    outputs = []
    for j in range(steps):
        own = rng.random(batch) <= p_d if mixing else None
        if j == 0:
            p = Tensor(np.zeros((n,) + batch))
        elif p_d >= 1.0:
            p = prev
        elif p_d <= 0.0:
            p = Tensor(tv[j - 1])
        elif np.all(own):
            p = prev
        elif not np.any(own):
            p = Tensor(tv[j - 1])
        else:
            p = ad.where(np.broadcast_to(own, (n,) + batch), prev, Tensor(tv[j - 1]))
        for i, layer in enumerate(params.decoder.layers):
            states[i] = gru_cell(layer, p, states[i])
            p = states[i]
        prev = _output(params, states[-1])
        outputs.append(prev)
    return ad.stack(outputs)


@dataclass
class ForwardResult:
    reconstruction: Tensor  # (T, N, B)
    finals: list[Tensor]  # per layer (Q_l, B)
    latent: Tensor  # h(T), (Q_L, B)
    projection: Tensor | None  # z(T), (G, B)


# ---------------------------------------------------------------------------
# model wrapper


@dataclass
class CbdaeModel:
    arch: ModelArch
    params: CbdaeParams
    normalizer: Normalizer = field(default=None)

    def __post_init__(self):
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(self.arch.n_channels)

    @classmethod
    def create(cls, arch: ModelArch, seed: int = 0, normalizer: Normalizer | None = None) -> CbdaeModel:
        return cls(arch, CbdaeParams.init(arch, np.random.default_rng(seed)), normalizer)

    # training path -------------------------------------------------------

    def forward(self, batch_norm: np.ndarray, p_d: float, rng: np.random.Generator | None = None) -> ForwardResult:
        """Graph forward pass for normalised windows ``(B, T, N)``."""
        xs = np.ascontiguousarray(np.transpose(batch_norm, (1, 2, 0)))
        finals, _ = encode(self.params.encoder, xs)
        latent = finals[-1]
        proj = project_latent(self.params, latent) if self.arch.has_head else None
        recon = decode(self.params, finals, xs, p_d, rng)
        return ForwardResult(recon, finals, latent, proj)

    # inference path ------------------------------------------------------

    def _check_windows(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[2] != self.arch.n_channels:
            raise DimensionError(f"expected windows (B, T, {self.arch.n_channels}), got {windows.shape}")
        if windows.shape[1] == 0:
            raise ContractError("empty window")
        return windows

    def infer_normalized(self, windows_norm: np.ndarray):
        """Return (reconstruction (B, T, N), encoder finals) in normalised units with ``p_d = 1``."""
        count, steps, n = windows_norm.shape
        finals = infer_encode(self.params.encoder, windows_norm)
        states = [h.copy() for h in finals]
        dec = [(l.W.values, l.U.values, l.b.values) for l in self.params.decoder.layers]
        W_out, b_out = self.params.W_out.values, self.params.b_out.values
        recon = np.empty((count, steps, n))
        p = np.zeros((count, n))
        for j in range(steps):
            for i, (W, U, b) in enumerate(dec):
                p = infer_cell(W, U, b, p, states[i])
                states[i] = p
            p = _rowwise(W_out, p) + b_out
            recon[:, j, :] = p
        return recon, finals

    def reconstruct(self, windows: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Full reconstructions in raw units for raw windows ``(B, T, N)``."""
        windows = self._check_windows(windows)
        out = np.empty_like(windows)
        for start in range(0, windows.shape[0], chunk):
            part = self.normalizer.apply(windows[start : start + chunk])
            recon, _ = self.infer_normalized(part)
            out[start : start + chunk] = self.normalizer.invert(recon)
        return out

    def denoise_windows(self, windows: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Estimate of the newest sample of each raw window, shape (B, N)."""
        windows = self._check_windows(windows)
        out = np.empty((windows.shape[0], windows.shape[2]))
        for start in range(0, windows.shape[0], chunk):
            part = self.normalizer.apply(windows[start : start + chunk])
            recon, _ = self.infer_normalized(part)
            out[start : start + chunk] = self.normalizer.invert(recon[:, -1, :])
        return out

    def denoise_window(self, window: TimeWindow) -> np.ndarray:
        if window.n_channels != self.arch.n_channels:
            raise DimensionError(f"window has {window.n_channels} channels, model expects {self.arch.n_channels}")
        return self.denoise_windows(window.matrix.T[None])[0]

    def latents(self, windows: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Top-layer final encoder state h(T) per raw window, shape (B, Q_L)."""
        windows = self._check_windows(windows)
        out = []
        for start in range(0, windows.shape[0], chunk):
            finals = infer_encode(self.params.encoder, self.normalizer.apply(windows[start : start + chunk]))
            out.append(finals[-1])
        return np.concatenate(out, axis=0)

    def denoise_series(self, values: np.ndarray) -> np.ndarray:
        """Offline path: estimate every sample of a raw (n, N) series.

        Rows before the first full window are NaN.
        """
        values = np.asarray(values, dtype=np.float64)
        T = self.arch.window
        out = np.full(values.shape, np.nan)
        if values.shape[0] >= T:
            out[T - 1 :] = self.denoise_windows(sliding_windows(values, T))
        return out


def sliding_windows(values: np.ndarray, depth: int) -> np.ndarray:
    """All ``depth``-long windows of a (n, N) series as a (n - depth + 1, depth, N) array."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < depth:
        return np.empty((0, depth, values.shape[1]))
    view = np.lib.stride_tricks.sliding_window_view(values, depth, axis=0)
    return np.ascontiguousarray(np.transpose(view, (0, 2, 1)))


class DenoiserState:
    """Streaming denoiser: buffers the last T samples and emits an estimate per sample."""

    def __init__(self, model: CbdaeModel):
        self.model = model
        self.buffer: deque[np.ndarray] = deque(maxlen=model.arch.window)

    @property
    def ready(self) -> bool:
        return len(self.buffer) == self.buffer.maxlen

    def reset(self) -> None:
        self.buffer.clear()

    def push(self, y_tilde) -> np.ndarray | None:
        """Add a sample; return the estimate of it, or None until the buffer is full."""
        y = np.asarray(y_tilde, dtype=np.float64)
        if y.shape != (self.model.arch.n_channels,):
            raise DimensionError(f"sample has shape {y.shape}, expected ({self.model.arch.n_channels},)")
        if not np.all(np.isfinite(y)):
            raise ContractError("sample holds non-finite values")
        self.buffer.append(y.copy())
        if not self.ready:
            return None
        return self.model.denoise_windows(np.stack(self.buffer)[None])[0]


def denoise_step(state: DenoiserState, y_tilde) -> np.ndarray | None:
    return state.push(y_tilde)
