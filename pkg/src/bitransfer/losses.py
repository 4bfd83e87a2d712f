"""Loss functions: distillation KL, cross-entropy, mask (BCE + dice),
segmentation composite, Pearson CC and the saliency KL - CC loss.

Every loss has a batched ``*_rows`` form returning one value per sample; the
scalar forms are thin wrappers.  Ground-truth arguments (labels, binary
masks, target maps) are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DegenerateInputError, DimensionError, DomainError

KL_DIRECTIONS = ("forward", "reverse")
PROB_CLIP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    temperature: float = 1.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls_correct: float = 2.0
    lambda_cls_incorrect: float = 0.1
    dice_eps: float = 1.0
    cc_floor: float = 1e-8

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        for name in ("lambda_ce", "lambda_dice", "lambda_cls_correct", "lambda_cls_incorrect"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.dice_eps > 0:
            raise ConfigError("dice smoothing must be positive")
        if not self.cc_floor > 0:
            raise ConfigError("cc variance floor must be positive")


def _const(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _labels(y, n, n_classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {list(y.shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    return y.astype(np.int64)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def kl_distill(z_student, z_teacher, T=1.0, per_sample=False, direction="forward"):
    """T^2-scaled KL between softened distributions; teacher side is detached.

    ``direction="forward"`` is KL(teacher || student), ``"reverse"`` swaps the
    arguments.  Returns per-sample values or their batch mean.
    """
    if z_student.data.shape != z_teacher.data.shape:
        raise DimensionError(f"kl_distill: {z_student.shape} vs {z_teacher.shape}")
    if direction not in KL_DIRECTIONS:
        raise ConfigError(f"kl direction must be one of {KL_DIRECTIONS}")
    if not T > 0:
        raise ConfigError(f"temperature must be positive, got {T}")
    ls = ad.log_softmax(z_student, T)
    lt = ad.log_softmax(ad.stop_gradient(z_teacher), T)
    if direction == "forward":
        rows = ad.tsum(ad.exp(lt) * (lt - ls), axis=1)
    else:
        rows = ad.tsum(ad.exp(ls) * (ls - lt), axis=1)
    rows = ad.scale(rows, T * T)
    return rows if per_sample else ad.mean(rows)


def kl_maps(p_student, p_teacher, per_sample=False, direction="forward"):
    """KL between sum-normalized nonnegative maps (rows of N x M); teacher detached."""
    s = _normalize_rows(p_student)
    t = _normalize_rows(ad.stop_gradient(p_teacher))
    ls, lt = ad.log(s), ad.log(t)
    if direction == "forward":
        rows = ad.tsum(t * (lt - ls), axis=1)
    else:
        rows = ad.tsum(s * (ls - lt), axis=1)
    return rows if per_sample else ad.mean(rows)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def cross_entropy(z, y, per_sample=False):
    n, c = z.data.shape
    y = _labels(y, n, c)
    rows = -ad.take(ad.log_softmax(z), y)
    return rows if per_sample else ad.mean(rows)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def mask_loss_rows(p, q, w=LossWeights()):
    """lambda_ce * BCE + lambda_dice * dice for each row of N x P probabilities."""
    P = p.data
    Q = _const(q)
    if P.shape != Q.shape or P.ndim != 2:
        raise DimensionError(f"mask_loss: {list(P.shape)} vs {list(Q.shape)}")
    if np.any(P <= 0.0) or np.any(P >= 1.0):
        raise DomainError("mask_loss: probabilities must lie strictly inside (0, 1)")
    if np.any((Q != 0.0) & (Q != 1.0)):
        raise DataError("mask_loss: target mask must be binary")
    q_t, notq_t = Tensor(Q), Tensor(1.0 - Q)
    bce = -ad.mean(ad.log(p) * q_t + ad.log(1.0 - p) * notq_t, axis=1)
    inter = ad.tsum(p * q_t, axis=1)
    denom = ad.tsum(p, axis=1) + Tensor(Q.sum(axis=1) + w.dice_eps)
    dice = 1.0 - (ad.scale(inter, 2.0) + w.dice_eps) / denom
    return ad.scale(bce, w.lambda_ce) + ad.scale(dice, w.lambda_dice)


def mask_loss(p, q, w=LossWeights()):
    flat = ad.reshape(p, (1, p.data.size))
    return ad.tsum(mask_loss_rows(flat, _const(q).reshape(1, -1), w))


def cls_weight(z_cls, y_cls, w=LossWeights()):
    """lambda_cls depends on whether the class prediction is already right."""
    correct = int(np.argmax(z_cls)) == int(y_cls)
    return w.lambda_cls_correct if correct else w.lambda_cls_incorrect


def semseg_loss(z_cls, z_mask, y_cls, y_mask, w=LossWeights()):
    """Mask loss on sigmoid(z_mask) plus the correctness-weighted class CE."""
    if z_cls.data.ndim != 1:
        raise DimensionError(f"semseg_loss: class logits must be a vector, got {z_cls.shape}")
    p = ad.clip(ad.sigmoid(z_mask), PROB_CLIP, 1.0 - PROB_CLIP)
    ce = cross_entropy(ad.reshape(z_cls, (1, z_cls.data.size)), [y_cls])
    lam = cls_weight(z_cls.data, y_cls, w)
    return mask_loss(p, y_mask, w) + ad.scale(ce, lam)


# ---------------------------------------------------------------------------
# correlation / saliency
# ---------------------------------------------------------------------------

def _center_rows(x):
    n, m = x.data.shape
    return x - ad.expand_cols(ad.mean(x, axis=1), m)


def cc_rows(p, q, floor=1e-8, floor_p=False):
    """Pearson correlation of each row pair of two N x M tensors.

    With ``floor_p`` the variance of ``p`` is clamped to ``floor`` instead of
    raising, so a constant prediction scores 0 rather than failing.
    """
    if not isinstance(q, Tensor):
        q = Tensor(q)
    if p.data.shape != q.data.shape or p.data.ndim != 2:
        raise DimensionError(f"cc: {p.shape} vs {q.shape}")
    var_q_raw = q.data.var(axis=1)
    var_p_raw = p.data.var(axis=1)
    if np.any(var_q_raw < floor) or (not floor_p and np.any(var_p_raw < floor)):
        raise DegenerateInputError("cc: input variance below floor")
    pc, qc = _center_rows(p), _center_rows(q)
    cov = ad.mean(pc * qc, axis=1)
    var_p = ad.mean(pc * pc, axis=1)
    var_q = ad.mean(qc * qc, axis=1)
    if floor_p:
        low = var_p.data < floor
        if low.any():
            # swap in the floor as a constant where p is (near) flat
            keep = Tensor((~low).astype(np.float64))
            var_p = var_p * keep + Tensor(np.where(low, floor, 0.0))
    return cov / ad.sqrt(var_p * var_q)


def cc(p, q, floor=1e-8):
    """Pearson correlation of two equally shaped tensors, in [-1, 1]."""
    if not isinstance(q, Tensor):
        q = Tensor(q)
    flat_p = ad.reshape(p, (1, p.data.size))
    flat_q = ad.reshape(q, (1, q.data.size))
    return ad.tsum(cc_rows(flat_p, flat_q, floor))


def _normalize_rows(x):
    sums = x.data.sum(axis=1)
    if np.any(x.data < 0.0) or np.any(sums <= 0.0):
        raise DegenerateInputError("map must be nonnegative with a positive sum")
    m = x.data.shape[1]
    return x / ad.expand_cols(ad.tsum(x, axis=1), m)


def vsp_rows(p, q, w=LossWeights()):
    """KL(q_norm || p_norm) - CC(p, q) for each row of N x M maps."""
    Q = _const(q)
    if p.data.shape != Q.shape or Q.ndim != 2:
        raise DimensionError(f"vsp_loss: {p.shape} vs {list(Q.shape)}")
    if np.any(Q < 0.0) or np.any(Q.sum(axis=1) <= 0.0):
        raise DegenerateInputError("target map must be nonnegative with a positive sum")
    qn = Q / Q.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.where(qn > 0.0, qn * np.log(qn), 0.0).sum(axis=1)
    pn = _normalize_rows(p)
    kl = Tensor(neg_entropy) - ad.tsum(ad.log(pn) * Tensor(qn), axis=1)
    return kl - cc_rows(p, Tensor(Q), w.cc_floor, floor_p=True)


def vsp_loss(p, q, w=LossWeights()):
    Q = _const(q)
    flat = ad.reshape(p, (1, p.data.size))
    return ad.tsum(vsp_rows(flat, Q.reshape(1, -1), w))
