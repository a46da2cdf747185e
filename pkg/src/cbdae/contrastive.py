"""Temporal hard-negative batches and the training losses.

Column indices are 0-based throughout: the sequential part of a batch
occupies columns ``0 .. s-1`` and the random part ``s .. s+r-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, RangeError


@dataclass(frozen=True)
class TrainBatch:
    """Window indices of a batch: ``s`` consecutive windows then ``r`` random ones."""

    indices: np.ndarray
    s: int
    r: int

    @property
    def size(self) -> int:
        return self.s + self.r

    @property
    def sequential(self) -> np.ndarray:
        return self.indices[: self.s]

    @property
    def random(self) -> np.ndarray:
        return self.indices[self.s :]


def build_batch(n_windows: int, k: int, s: int, r: int, rng: np.random.Generator) -> TrainBatch:
    """Windows ``k-s+1 .. k`` followed by ``r`` windows drawn without replacement.

    The random draw covers the whole dataset, so it may repeat sequential members.
    """
    if s < 3:
        raise ContractError(f"s must be at least 3, got {s}")
    if r < 0:
        raise ContractError(f"r must be non-negative, got {r}")
    if k >= n_windows or k - s + 1 < 0:
        raise RangeError(f"need windows {k - s + 1}..{k} but the dataset holds 0..{n_windows - 1}")
    if r > n_windows:
        raise RangeError(f"cannot draw {r} distinct windows from {n_windows}")
    seq = np.arange(k - s + 1, k + 1)
    rand = rng.choice(n_windows, size=r, replace=False) if r else np.empty(0, dtype=np.int64)
    return TrainBatch(np.concatenate([seq, rand]).astype(np.int64), s, r)


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two vectors; 0 when either norm is below ``eps``."""
    na, nb = ad.l2norm(a), ad.l2norm(b)
    if na.item() < eps or nb.item() < eps:
        return Tensor(0.0)
    return ad.div(ad.dot(a, b), ad.hadamard(na, nb))


def similarity_matrix(Z: Tensor) -> Tensor:
    """Pairwise cosine similarities of the columns of ``Z``."""
    Zn = ad.normalize_columns(Z)
    return ad.matmul(ad.transpose(Zn), Zn)


def _valid_exclusion(excl: int | None, s: int) -> int | None:
    # only temporal neighbours (columns of the sequential block) are protected
    if excl is None or excl < 0 or excl >= s:
        return None
    return excl


def _terms(S: Tensor, rows, cols, masks) -> Tensor:
    pos = S[(np.asarray(rows), np.asarray(cols))]
    lse = ad.logsumexp_masked(S[np.asarray(rows)], np.asarray(masks))
    return ad.sub(lse, pos)


def nce_term(Z: Tensor, i: int, j: int, excl: int | None = None) -> Tensor:
    """``-log(exp(sim(Z_i, Z_j)) / sum_k exp(sim(Z_i, Z_k)))`` over ``k != i, excl``.

    The positive column ``j`` stays in the denominator.
    """
    B = Z.shape[1]
    if i == j:
        raise ContractError("anchor and positive must differ")
    if not (0 <= i < B and 0 <= j < B):
        raise RangeError(f"columns {i}, {j} outside 0..{B - 1}")
    mask = np.ones(B, dtype=bool)
    mask[i] = False
    if excl is not None and 0 <= excl < B:
        mask[excl] = False
    return ad.tsum(_terms(similarity_matrix(Z), [i], [j], [mask]))


def nce_pairs(s: int, B: int):
    """Anchor, positive and denominator mask of every term of the NCE loss."""
    rows, cols, masks = [], [], []
    for k in range(s - 1):
        for anchor, positive, excl in ((k, k + 1, k - 1), (k + 1, k, k + 2)):
            mask = np.ones(B, dtype=bool)
            mask[anchor] = False
            e = _valid_exclusion(excl, s)
            if e is not None:
                mask[e] = False
            rows.append(anchor)
            cols.append(positive)
            masks.append(mask)
    return rows, cols, np.array(masks)


def nce_loss(Z: Tensor, s: int) -> Tensor:
    """Temporal InfoNCE over consecutive pairs of the sequential block, divided by ``2s - 1``."""
    if s < 3:
        raise ContractError(f"s must be at least 3, got {s}")
    if Z.values.ndim != 2 or Z.shape[1] < s:
        raise DimensionError(f"Z must be (G, B) with B >= s, got {Z.shape}")
    rows, cols, masks = nce_pairs(s, Z.shape[1])
    total = ad.tsum(_terms(similarity_matrix(Z), rows, cols, masks))
    return ad.scale(total, 1.0 / (2 * s - 1))


def ae_loss(predictions: Tensor, targets) -> Tensor:
    """Mean absolute reconstruction error over every element."""
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if predictions.shape != targets.shape:
        raise DimensionError(f"ae_loss: {predictions.shape} vs {targets.shape}")
    return ad.mean(ad.absolute(ad.sub(predictions, targets)))


def l1_latent_loss(h: Tensor) -> Tensor:
    """Mean absolute latent activation (the L1 ablation's regulariser)."""
    return ad.mean(ad.absolute(h))


def total_loss(l_ae: Tensor, l_reg: Tensor | None, beta: float) -> Tensor:
    if beta < 0:
        raise ContractError(f"beta must be non-negative, got {beta}")
    if l_reg is None or beta == 0.0:
        return l_ae
    return ad.add(l_ae, ad.scale(l_reg, beta))
