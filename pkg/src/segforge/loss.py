"""Combined weighted segmentation loss: soft IoU + soft Dice + weighted cross-entropy.

``A`` is a one-hot target of shape (N, C, H, W) and ``B`` holds per-pixel class
probabilities of the same shape.  Overlap terms are computed per sample and per
scored class as ratios of pixel sums, then averaged; background (class 0) is
left out of the overlap terms by default but still supervises the
cross-entropy term through its own, smaller weight.

Every loss averages over the batch axis, so the loss of a batch equals the mean
of the per-sample losses.  Gradient accumulation relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_FLOOR = 1e-7


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_iou: float = 0.8
    lambda_dice: float = 1.0
    lambda_ce: float = 10.0
    # Empty means "derive from num_classes": background 0.15, foreground 1.0.
    class_weights: List[float] = field(default_factory=list)
    background_weight: float = 0.15
    exclude_background_from_overlap: bool = True
    smooth_eps: float = 1e-6

    def validate(self, num_classes: Optional[int] = None) -> None:
        for name in ("lambda_iou", "lambda_dice", "lambda_ce", "background_weight"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"{name} must be >= 0")
        if not self.smooth_eps > 0:
            raise LossConfigError("smooth_eps must be > 0")
        if any(w < 0 for w in self.class_weights):
            raise LossConfigError("class_weights must be >= 0")
        if num_classes is not None and self.class_weights and len(self.class_weights) != num_classes:
            raise LossConfigError(
                f"class_weights has {len(self.class_weights)} entries, expected {num_classes}")

    def weights_for(self, num_classes: int) -> np.ndarray:
        """Per-class cross-entropy weights (index 0 is background)."""
        self.validate(num_classes)
        if self.class_weights:
            return np.asarray(self.class_weights, dtype=np.float64)
        w = np.ones(num_classes)
        w[0] = self.background_weight
        return w


def one_hot(mask, num_classes: int) -> Tensor:
    """(H, W) or (N, H, W) integer mask -> (N, C, H, W) one-hot tensor."""
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"mask must be (H, W) or (N, H, W), got shape {m.shape}")
    bad = np.argwhere((m < 0) | (m >= num_classes))
    if bad.size:
        n, y, x = (int(v) for v in bad[0])
        raise ValueError(
            f"class index {int(m[n, y, x])} at sample {n}, pixel (row {y}, col {x}) "
            f"is outside [0, {num_classes})")
    m = m.astype(np.intp)
    out = (m[:, None, :, :] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)
    return Tensor(out)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"target shape {a.shape} != probability shape {b.shape}")
    if a.ndim != 4:
        raise T.ShapeError(f"expected (N, C, H, W), got {a.shape}")


def _scored_classes(num_classes: int, cfg: LossConfig) -> List[int]:
    start = 1 if cfg.exclude_background_from_overlap and num_classes > 1 else 0
    return list(range(start, num_classes))


def _per_class_sums(a: Tensor, b: Tensor, cfg: LossConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Pixel sums of A*B, A and B per (sample, scored class)."""
    cls = _scored_classes(a.shape[1], cfg)
    inter = T.take((a * b).sum(axis=(2, 3)), cls, axis=1)
    sum_a = T.take(a.sum(axis=(2, 3)), cls, axis=1)
    sum_b = T.take(b.sum(axis=(2, 3)), cls, axis=1)
    return inter, sum_a, sum_b


def soft_iou_loss(a: Tensor, b: Tensor, cfg: LossConfig) -> Tensor:
    """1 - mean over scored classes of (sum AB + eps) / (sum (A + B - AB) + eps)."""
    _check_pair(a, b)
    inter, sum_a, sum_b = _per_class_sums(a, b, cfg)
    eps = cfg.smooth_eps
    union = sum_a + sum_b - inter
    ratio = (inter + eps) / (union + eps)
    return 1.0 - ratio.mean()


def soft_dice_loss(a: Tensor, b: Tensor, cfg: LossConfig) -> Tensor:
    """1 - mean over scored classes of (2 sum AB + eps) / (sum A + sum B + eps)."""
    _check_pair(a, b)
    inter, sum_a, sum_b = _per_class_sums(a, b, cfg)
    eps = cfg.smooth_eps
    ratio = (inter * 2.0 + eps) / (sum_a + sum_b + eps)
    return 1.0 - ratio.mean()


def weighted_cross_entropy(a: Tensor, b: Tensor, cfg: LossConfig) -> Tensor:
    """Class-weighted negative log-likelihood of the truth channel.

    Each sample is normalised by the total weight of its pixels; a sample whose
    pixels all carry zero weight contributes zero.
    """
    _check_pair(a, b)
    n, c = a.shape[:2]
    w = cfg.weights_for(c)
    truth_prob = (a * b).sum(axis=1)  # (N, H, W)
    nll = -T.log(T.clamp_min(truth_prob, LOG_FLOOR))
    pixel_w = np.tensordot(w, a.data, axes=([0], [1]))  # (N, H, W)
    denom = pixel_w.sum(axis=(1, 2))
    denom = np.where(denom > 0, denom, 1.0)
    per_sample = (nll * pixel_w).sum(axis=(1, 2)) / denom
    return per_sample.mean()


@dataclass
class LossBreakdown:
    total: Tensor
    iou: float
    dice: float
    ce: float

    def as_dict(self) -> Dict[str, float]:
        return {"L": self.total.item(), "L_iou": self.iou, "L_dice": self.dice, "L_ce": self.ce}


def combined_loss(a: Tensor, b: Tensor, cfg: LossConfig) -> LossBreakdown:
    """lambda_iou * L_iou + lambda_dice * L_dice + lambda_ce * L_ce."""
    l_iou = soft_iou_loss(a, b, cfg)
    l_dice = soft_dice_loss(a, b, cfg)
    l_ce = weighted_cross_entropy(a, b, cfg)
    total = l_iou * cfg.lambda_iou + l_dice * cfg.lambda_dice + l_ce * cfg.lambda_ce
    return LossBreakdown(total, l_iou.item(), l_dice.item(), l_ce.item())


def loss_from_logits(logits: Tensor, mask, cfg: LossConfig) -> LossBreakdown:
    """Softmax the network output and score it against an integer mask batch."""
    probs = T.softmax_channels(logits)
    target = one_hot(mask, logits.shape[1])
    return combined_loss(target, probs, cfg)
