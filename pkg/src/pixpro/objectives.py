"""Training objectives: pixel contrast, pixel-to-propagation consistency, instance InfoNCE.

Pixel losses take feature maps shaped [N, d, h, w] (or cell matrices
[N, d, HW]) and a boolean positive mask [N, HW_a, HW_b] built from the view
geometry. Images without any positive pair are left out of every average;
when no image qualifies the loss comes back *skipped* (``value is None``)
instead of as a zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, ops
from .viewgen import AssignmentMatrix


@dataclass
class PixelLoss:
    value: Tensor | None
    pairs_used: int = 0
    images_used: int = 0

    @property
    def skipped(self) -> bool:
        return self.value is None

    def item(self) -> float:
        return 0.0 if self.value is None else self.value.item()


@dataclass
class LossBreakdown:
    total: Tensor | None
    pix_component: float
    instance_component: float
    pairs_used: int
    pairs_skipped: int
    loss_name: str = "pixpro"

    @property
    def skipped(self) -> bool:
        return self.total is None


def _cells(t: Tensor) -> Tensor:
    """[N, d, h, w] or [N, d, HW] -> [N, HW, d]."""
    if t.ndim == 4:
        n, d, h, w = t.shape
        t = t.reshape(n, d, h * w)
    return ops.transpose(t, (0, 2, 1))


def _masks(assign, n: int) -> np.ndarray:
    if isinstance(assign, AssignmentMatrix):
        assign = [assign]
    if isinstance(assign, (list, tuple)):
        assign = np.stack([a.positives if isinstance(a, AssignmentMatrix) else np.asarray(a) for a in assign])
    mask = np.asarray(assign, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[0] != n:
        raise ValueError(f"assignment batch {mask.shape[0]} does not match feature batch {n}")
    return mask


def pixpro_loss(y_a: Tensor, y_b: Tensor, xm_a: Tensor, xm_b: Tensor, assign) -> PixelLoss:
    """Mean of ``-cos(y_i, x'_j) - cos(y_j, x'_i)`` over positive pairs, per image then over the batch.

    ``y_*`` are propagated online features, ``xm_*`` momentum features.
    """
    mask = _masks(assign, y_a.shape[0])
    counts = mask.sum(axis=(1, 2))
    valid = counts > 0
    if not valid.any():
        return PixelLoss(None)
    cos_ab = ops.cosine_similarity_matrix(_cells(y_a), _cells(xm_b))
    cos_ba = ops.cosine_similarity_matrix(_cells(y_b), _cells(xm_a))
    pair = cos_ab + ops.transpose_last(cos_ba)
    weight = np.where(valid, 1.0 / np.maximum(counts, 1), 0.0) / valid.sum()
    w = (mask * weight[:, None, None]).astype(pair.dtype)
    value = -ops.sum(pair * w)
    return PixelLoss(value, int(counts.sum()), int(valid.sum()))


def pix_contrast_direction(x: Tensor, xm: Tensor, mask: np.ndarray, tau: float):
    """Per-cell contrastive terms for one direction.

    Returns (loss [N, HW_x] tensor, qualifying-cell mask [N, HW_x]); the sum
    over positives sits inside the log.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = ops.cosine_similarity_matrix(_cells(x), _cells(xm)) / tau
    per_cell = ops.logsumexp(logits, axis=-1) - ops.masked_logsumexp(logits, mask, axis=-1)
    return per_cell, mask.any(axis=-1)


def pix_contrast_loss(x_a: Tensor, x_b: Tensor, xm_a: Tensor, xm_b: Tensor, assign, tau: float = 0.3) -> PixelLoss:
    """Pixel contrast averaged over qualifying cells, both directions, then over images."""
    mask = _masks(assign, x_a.shape[0])
    la, qa = pix_contrast_direction(x_a, xm_b, mask, tau)
    lb, qb = pix_contrast_direction(x_b, xm_a, np.swapaxes(mask, 1, 2), tau)
    valid = qa.any(axis=1)
    if not valid.any():
        return PixelLoss(None)
    n_valid = valid.sum()
    wa = qa / np.maximum(qa.sum(axis=1, keepdims=True), 1) * 0.5 / n_valid
    wb = qb / np.maximum(qb.sum(axis=1, keepdims=True), 1) * 0.5 / n_valid
    value = ops.sum(la * wa.astype(la.dtype)) + ops.sum(lb * wb.astype(lb.dtype))
    return PixelLoss(value, int(mask.sum()), int(n_valid))


def info_nce(z: Tensor, zm: Tensor, tau: float) -> Tensor:
    """One-direction InfoNCE: anchor ``z[i]`` against positives ``zm[i]`` and negatives ``zm[k]``, k != i."""
    n = z.shape[0]
    if n < 2:
        raise ValueError("instance loss needs a batch of at least 2 (no negatives otherwise)")
    logits = ops.cosine_similarity_matrix(z, zm) / tau
    diag = np.eye(n, dtype=bool)
    per_anchor = ops.logsumexp(logits, axis=-1) - ops.masked_logsumexp(logits, diag, axis=-1)
    return ops.mean(per_anchor)


def instance_loss(z_a: Tensor, z_b: Tensor, zm_a: Tensor, zm_b: Tensor, tau: float = 0.3) -> Tensor:
    """Symmetrised InfoNCE between online and momentum global embeddings."""
    return (info_nce(z_a, zm_b, tau) + info_nce(z_b, zm_a, tau)) * 0.5


def combined_loss(pix, inst, alpha: float = 1.0, pairs_skipped: int = 0, loss_name: str = "pixpro") -> LossBreakdown:
    """``total = pix + alpha * inst``; a skipped pixel loss skips the whole step."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if isinstance(pix, PixelLoss):
        pairs = pix.pairs_used
        pix = pix.value
    else:
        pix = pix if isinstance(pix, Tensor) or pix is None else Tensor(pix)
        pairs = -1
    if pix is None:
        return LossBreakdown(None, 0.0, 0.0, 0, pairs_skipped, loss_name)
    total = pix
    inst_val = 0.0
    if inst is not None:
        inst = inst if isinstance(inst, Tensor) else Tensor(inst)
        inst_val = inst.item()
        if alpha != 0:
            total = pix + inst * alpha
    return LossBreakdown(total, pix.item(), inst_val, pairs, pairs_skipped, loss_name)


def multiscale_pixpro_loss(levels: Sequence[tuple]) -> PixelLoss:
    """Mean over levels of the per-level consistency loss; empty levels are excluded.

    Each entry is ``(y_a, y_b, xm_a, xm_b, assign)`` for one pyramid level.
    """
    parts = [pixpro_loss(*lv) for lv in levels]
    live = [p for p in parts if not p.skipped]
    if not live:
        return PixelLoss(None)
    total = live[0].value
    for p in live[1:]:
        total = total + p.value
    return PixelLoss(total / float(len(live)), sum(p.pairs_used for p in live),
                     max(p.images_used for p in live))


def multiscale_pix_contrast_loss(levels: Sequence[tuple], tau: float) -> PixelLoss:
    parts = [pix_contrast_loss(*lv, tau=tau) for lv in levels]
    live = [p for p in parts if not p.skipped]
    if not live:
        return PixelLoss(None)
    total = live[0].value
    for p in live[1:]:
        total = total + p.value
    return PixelLoss(total / float(len(live)), sum(p.pairs_used for p in live),
                     max(p.images_used for p in live))
