"""Training loop for the denoising autoencoder and its ablations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .contrastive import ae_loss, build_batch, l1_latent_loss, nce_loss, total_loss
from .dataio import Series
from .errors import ContractError, NumericalFault
from .model import CbdaeModel, ModelArch, Normalizer, sliding_windows

log = logging.getLogger(__name__)

VARIANTS = ("CBDAE", "CBDAE_h", "BDAE_L1", "BDAE_NoReg")


def canonical_variant(name: str) -> str:
    for v in VARIANTS:
        if v.lower() == str(name).lower():
            return v
    raise ContractError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class TrainConfig:
    window: int = 60
    batch_size: int = 64
    s: int = 32
    r: int = 32
    layers: int = 2
    hidden: int = 80
    proj_dim: int = 20
    head_inner: int | None = None
    beta: float = 1.5
    l1_beta: float = 1e-6
    k_d: float = 0.0
    c_d: float = 0.02
    epochs: int = 100
    lr: float = 1e-3
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    val_batches: int = 8
    variant: str = "CBDAE"
    seed: int = 0

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.s + self.r != self.batch_size:
            raise ContractError(f"s + r = {self.s + self.r} must equal the batch size {self.batch_size}")
        if self.s < 3 or self.r < 0:
            raise ContractError("need s >= 3 and r >= 0")
        for name in ("window", "layers", "hidden", "proj_dim", "epochs", "val_batches"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.beta < 0 or self.l1_beta < 0 or self.k_d < 0 or self.c_d < 0 or self.lr <= 0:
            raise ContractError("beta, l1_beta, k_d, c_d must be non-negative and lr positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def effective_beta(self) -> float:
        return {"CBDAE": self.beta, "CBDAE_h": self.beta, "BDAE_L1": self.l1_beta, "BDAE_NoReg": 0.0}[self.variant]

    def arch(self, series: Series) -> ModelArch:
        return ModelArch(
            n_channels=series.n_channels,
            window=self.window,
            hidden=(self.hidden,) * self.layers,
            proj_dim=self.proj_dim if self.variant == "CBDAE" else None,
            head_inner=self.head_inner,
            channel_names=tuple(series.channel_names),
            input_channels=tuple(series.input_channels),
        )


def scheduled_probability(epoch: int, k_d: float, c_d: float) -> float:
    """Probability of feeding the decoder its own estimate at a given epoch."""
    if k_d < 0 or c_d < 0:
        raise ContractError("k_d and c_d must be non-negative")
    return min(1.0, k_d + c_d * epoch)


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params, grads, m, v, lr: float, step: int, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place; ``step`` counts from 1."""
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params, m, v


class Adam:
    def __init__(self, tensors, lr: float = 1e-3):
        self.tensors = list(tensors)
        self.lr = lr
        self.m = [np.zeros_like(t.values) for t in self.tensors]
        self.v = [np.zeros_like(t.values) for t in self.tensors]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in self.tensors]
        adam_step([t.values for t in self.tensors], grads, self.m, self.v, self.lr, self.step_count)


def clip_global_norm(tensors, max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; return the original norm."""
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors if t.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
    return total


# ---------------------------------------------------------------------------
# log


@dataclass
class EpochRecord:
    epoch: int
    l_ae: float
    l_nce: float
    l_total: float
    p_d: float
    clean_rmse: float | None = None
    val_loss: float | None = None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "l_ae", "l_nce", "l_total", "p_d", "clean_rmse", "val_loss")

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError("epoch indices must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) for c in self.COLUMNS])

    @classmethod
    def from_csv(cls, path) -> TrainLog:
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {c: (None if row[c] == "" else float(row[c])) for c in cls.COLUMNS}
                vals["epoch"] = int(vals["epoch"])
                out.records.append(EpochRecord(**vals))
        return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    last: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    next_epoch: int
    best_val: float
    best: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: CbdaeModel
    log: TrainLog
    state: TrainState
    config: TrainConfig


class _Windows:
    def __init__(self, series: Series, normalizer: Normalizer, depth: int):
        self.series = series
        self.raw = sliding_windows(series.values, depth)
        self.norm = sliding_windows(normalizer.apply(series.values), depth)

    def __len__(self) -> int:
        return self.raw.shape[0]


def _regulariser(variant: str, fwd, s: int):
    if variant == "CBDAE":
        return nce_loss(fwd.projection, s)
    if variant == "CBDAE_h":
        return nce_loss(fwd.latent, s)
    if variant == "BDAE_L1":
        return l1_latent_loss(fwd.latent)
    return None


def batch_losses(model: CbdaeModel, config: TrainConfig, windows: np.ndarray, p_d: float, rng):
    """Forward one batch of normalised windows (B, T, N); return (L, L_AE, L_reg)."""
    fwd = model.forward(windows, p_d, rng)
    l_ae = ae_loss(fwd.reconstruction, np.transpose(windows, (1, 2, 0)))
    l_reg = _regulariser(config.variant, fwd, config.s)
    return total_loss(l_ae, l_reg, config.effective_beta), l_ae, l_reg


def _anchors(n_windows: int, s: int, rng: np.random.Generator) -> np.ndarray:
    blocks = n_windows // s
    if blocks == 0:
        raise ContractError(f"need at least s={s} windows, have {n_windows}")
    return (rng.permutation(blocks) + 1) * s - 1


def clean_rmse(model: CbdaeModel, windows: _Windows) -> float | None:
    """Average RMSE of the newest-sample estimates against the clean reference."""
    clean = windows.series.clean
    if clean is None:
        return None
    cols = [c for c in windows.series.score_channels if np.all(np.isfinite(clean[:, c]))]
    if not cols:
        return None
    est = model.denoise_windows(windows.raw)
    ref = clean[model.arch.window - 1 :]
    return float(np.mean(np.sqrt(np.mean((est[:, cols] - ref[:, cols]) ** 2, axis=0))))


def _validation_loss(model, config, val: _Windows) -> float:
    rng = np.random.default_rng([config.seed, 7919])
    n = len(val)
    anchors = _anchors(n, config.s, rng)[: config.val_batches]
    total = 0.0
    for k in anchors:
        batch = build_batch(n, int(k), config.s, min(config.r, n), rng)
        L, _, _ = batch_losses(model, config, val.norm[batch.indices], 1.0, None)
        total += L.item()
    return total / len(anchors)


def train(
    data: Series,
    config: TrainConfig,
    val_data: Series | None = None,
    *,
    resume: TrainState | None = None,
    model: CbdaeModel | None = None,
    on_epoch: Callable[[EpochRecord, CbdaeModel], None] | None = None,
) -> TrainResult:
    """Fit a model on the noisy series ``data``.

    Without ``val_data`` the last ``val_fraction`` of ``data`` is held out. The
    returned model carries the weights with the lowest validation loss; the
    returned state allows resuming with identical results.
    """
    if val_data is None:
        data, val_data = data.split_tail(config.val_fraction)
    if model is None:
        model = CbdaeModel.create(config.arch(data), config.seed, Normalizer.fit(data.values))
    elif model.arch.n_channels != data.n_channels:
        raise ContractError("model and data disagree on the channel count")
    T, s, r = config.window, config.s, config.r
    train_w = _Windows(data, model.normalizer, T)
    val_w = _Windows(val_data, model.normalizer, T)
    if len(train_w) < s:
        raise ContractError(f"training data yields {len(train_w)} windows, fewer than s={s}")
    if len(val_w) < s:
        raise ContractError(f"validation data yields {len(val_w)} windows, fewer than s={s}")

    names = list(model.params.named_tensors())
    tensors = model.params.parameters()
    opt = Adam(tensors, config.lr)
    start = 0
    best_val = math.inf
    best = model.params.snapshot()
    if resume is not None:
        model.params.load_snapshot(resume.last)
        opt.m = [resume.adam_m[k].copy() for k in names]
        opt.v = [resume.adam_v[k].copy() for k in names]
        opt.step_count = resume.adam_step
        start, best_val, best = resume.next_epoch, resume.best_val, resume.best

    history = TrainLog()
    for epoch in range(start, start + config.epochs):
        p_d = scheduled_probability(epoch, config.k_d, config.c_d)
        rng = np.random.default_rng([config.seed, epoch])
        sums = np.zeros(3)
        anchors = _anchors(len(train_w), s, rng)
        for k in anchors:
            batch = build_batch(len(train_w), int(k), s, min(r, len(train_w)), rng)
            L, l_ae, l_reg = batch_losses(model, config, train_w.norm[batch.indices], p_d, rng)
            if not np.isfinite(L.item()):
                exc = NumericalFault(
                    f"non-finite loss at epoch {epoch} (L_AE={l_ae.item()!r}, "
                    f"L_reg={None if l_reg is None else l_reg.item()!r}, p_d={p_d})"
                )
                exc.log = history
                raise exc
            model.params.zero_grad()
            ad.backward(L)
            clip_global_norm(tensors, config.clip_norm)
            opt.step()
            sums += (l_ae.item(), 0.0 if l_reg is None else l_reg.item(), L.item())
        means = sums / len(anchors)
        val_loss = _validation_loss(model, config, val_w)
        rec = EpochRecord(epoch, *map(float, means), p_d, clean_rmse(model, val_w), val_loss)
        history.append(rec)
        if val_loss < best_val:
            best_val, best = val_loss, model.params.snapshot()
        log.info(
            "epoch %d  L_AE %.5f  L_reg %.5f  L %.5f  p_d %.2f  val %.5f  clean %s",
            epoch, rec.l_ae, rec.l_nce, rec.l_total, p_d, val_loss, rec.clean_rmse,
        )
        if on_epoch is not None:
            on_epoch(rec, model)

    state = TrainState(
        last=model.params.snapshot(),
        adam_m=dict(zip(names, (m.copy() for m in opt.m))),
        adam_v=dict(zip(names, (v.copy() for v in opt.v))),
        adam_step=opt.step_count,
        next_epoch=start + config.epochs,
        best_val=best_val,
        best=best,
    )
    model.params.load_snapshot(best)
    return TrainResult(model, history, state, config)


def train_variant(data: Series, config: TrainConfig, variant: str, val_data: Series | None = None, **kw) -> TrainResult:
    """Train one of ``CBDAE``, ``CBDAE_h``, ``BDAE_L1`` or ``BDAE_NoReg``."""
    return train(data, replace(config, variant=canonical_variant(variant)), val_data, **kw)
