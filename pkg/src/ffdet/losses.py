"""Focal, smooth-L1 and segmentation losses and their weighted combination.

The three primitive losses are autograd operations evaluated in logit space
so that extreme logits never produce ``log(0)``. Per-element weights carry
the per-level normalisers, which keeps each level a single vectorised op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .supervision import IGNORE, POSITIVE
from .tensor import ShapeError, Tensor, _make, add_scalars, stable_sigmoid


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _check(logits: Tensor, arr: np.ndarray, what: str) -> None:
    if logits.shape != arr.shape:
        raise ShapeError(f"{what}: shape {arr.shape} does not match predictions {logits.shape}")


def focal_loss_sum(logits: Tensor, targets: np.ndarray, weights: np.ndarray, params: FocalParams = FocalParams()) -> Tensor:
    """sum(weights * FL(sigmoid(logits), targets)) as a scalar tensor."""
    _check(logits, targets, "focal_loss")
    _check(logits, weights, "focal_loss weights")
    z = logits.data.astype(np.float64)
    y = np.asarray(targets, np.float64)
    w = np.asarray(weights, np.float64)
    a, gm = params.alpha, params.gamma
    p = stable_sigmoid(z)
    sp_neg, sp_pos = _softplus(-z), _softplus(z)  # -ln p, -ln(1-p)
    q = 1.0 - p
    pos_term = a * q**gm * sp_neg
    neg_term = (1.0 - a) * p**gm * sp_pos
    loss = np.sum(w * np.where(y > 0.5, pos_term, neg_term))

    def bw(g):
        d_pos = -a * q**gm * (gm * p * sp_neg + q)
        d_neg = (1.0 - a) * p**gm * (gm * q * sp_pos + p)
        return ((g * w * np.where(y > 0.5, d_pos, d_neg)).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), "focal_loss", (logits,), bw)


def smooth_l1_sum(pred: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum(weights * f(pred - targets)) with f(d) = 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    _check(pred, targets, "smooth_l1")
    _check(pred, weights, "smooth_l1 weights")
    d = pred.data.astype(np.float64) - targets
    ad = np.abs(d)
    w = np.asarray(weights, np.float64)
    loss = np.sum(w * np.where(ad < 1.0, 0.5 * d * d, ad - 0.5))
    return _make(np.asarray(loss, dtype=pred.dtype), "smooth_l1", (pred,),
                 lambda g: ((g * w * np.clip(d, -1.0, 1.0)).astype(pred.dtype),))


def bce_logits_sum(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum(weights * sigmoid cross entropy), computed from logits."""
    _check(logits, targets, "seg_loss")
    _check(logits, weights, "seg_loss weights")
    z = logits.data.astype(np.float64)
    y = np.asarray(targets, np.float64)
    w = np.asarray(weights, np.float64)
    loss = np.sum(w * (_softplus(z) - y * z))
    return _make(np.asarray(loss, dtype=logits.dtype), "seg_loss", (logits,),
                 lambda g: ((g * w * (stable_sigmoid(z) - y)).astype(logits.dtype),))


# scalar forms -------------------------------------------------------------


def focal_loss(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    """Focal loss of one probability, evaluated through its logit."""
    p = float(p)
    with np.errstate(divide="ignore"):
        z = np.log(p) - np.log1p(-p)
    t = Tensor(np.array([z]))
    val = focal_loss_sum(t, np.array([float(y)]), np.ones(1), params).item()
    return 0.0 if np.isnan(val) else val


def smooth_l1(t, t_star) -> float:
    t = np.asarray(t, np.float64)
    return smooth_l1_sum(Tensor(t), np.asarray(t_star, np.float64), np.ones_like(t)).item()


def seg_loss(m_logits: Tensor, m_star: np.ndarray) -> Tensor:
    """Mean per-pixel sigmoid cross entropy for one level."""
    m_star = np.asarray(m_star, np.float64)
    if m_logits.shape != m_star.shape:
        raise ShapeError(f"seg_loss: logits {m_logits.shape} vs target {m_star.shape}")
    return bce_logits_sum(m_logits, m_star, np.full(m_star.shape, 1.0 / m_star.size))


# combination --------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: Tensor
    L_c: float
    L_r: float
    L_s: float
    per_level: dict[int, dict[str, float]] = field(default_factory=dict)
    n_cls: dict[int, list[int]] = field(default_factory=dict)
    n_reg: dict[int, list[int]] = field(default_factory=dict)

    @property
    def total_value(self) -> float:
        return self.total.item()

    def as_row(self) -> dict[str, float]:
        return {"L_c": self.L_c, "L_r": self.L_r, "L_s": self.L_s, "total": self.total_value}


def total_loss(outputs, targets, weights: LossWeights = LossWeights(), focal: FocalParams = FocalParams()) -> LossBreakdown:
    """Detection + segmentation objective for a batch.

    ``targets`` is a list (one per image) of level -> LevelTargets. For each
    image and level the classification sum is divided by the number of
    non-ignored anchors and the regression sum by the number of positives
    (levels without positives contribute nothing). Segmentation is the
    per-pixel mean, summed over levels. Batch loss is the mean over images.
    """
    n_img = len(targets)
    cls_terms, reg_terms, seg_terms = [], [], []
    per_level, n_cls, n_reg = {}, {}, {}
    for level in sorted(outputs.levels):
        out = outputs.levels[level]
        labels = np.stack([t[level].labels for t in targets]).astype(np.int8)  # (N, A, H, W)
        n, a, h, w = labels.shape
        valid = labels != IGNORE
        pos = labels == POSITIVE
        nc = valid.reshape(n, -1).sum(axis=1)
        nr = pos.reshape(n, -1).sum(axis=1)
        n_cls[level], n_reg[level] = nc.tolist(), nr.tolist()

        inv_c = np.where(nc > 0, 1.0 / np.maximum(nc, 1), 0.0) / n_img
        wc = valid * inv_c[:, None, None, None]
        lc = focal_loss_sum(out.cls_logits, pos.astype(np.float64), wc, focal)

        tt = np.stack([t[level].targets for t in targets]).reshape(n, 4 * a, h, w)
        inv_r = np.where(nr > 0, 1.0 / np.maximum(nr, 1), 0.0) / n_img
        wr = np.repeat(pos, 4, axis=1) * inv_r[:, None, None, None]
        lr = smooth_l1_sum(out.reg_deltas, tt, wr)

        terms = {"L_c": lc.item(), "L_r": lr.item()}
        cls_terms.append(lc)
        reg_terms.append(lr)
        if out.seg_logits is not None:
            ss = np.stack([t[level].seg for t in targets])
            ls = bce_logits_sum(out.seg_logits, ss, np.full(ss.shape, 1.0 / (h * w * n_img)))
            seg_terms.append(ls)
            terms["L_s"] = ls.item()
        per_level[level] = terms

    coeffs = [1.0] * len(cls_terms) + [weights.lambda1] * len(reg_terms) + [weights.lambda2] * len(seg_terms)
    total = add_scalars(cls_terms + reg_terms + seg_terms, coeffs)
    return LossBreakdown(
        total=total,
        L_c=float(sum(t.item() for t in cls_terms)),
        L_r=float(sum(t.item() for t in reg_terms)),
        L_s=float(sum(t.item() for t in seg_terms)),
        per_level=per_level,
        n_cls=n_cls,
        n_reg=n_reg,
    )
