"""Differentiable losses: weighted Dice, class-balanced cross-entropy, and
the modulated two-branch combination.

All losses take an (H, W) probability prediction, a binary ground truth and
optional per-pixel integer sample weights, and return plain floats; their
gradient companions return per-pixel d(loss)/d(pred) fields that are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ValidationError

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
CBCE_CLIP = 1e-7
ORIENTATIONS = ("text", "printed-eq5")


def _check_triple(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")
    if weights is None:
        w = np.ones_like(pred)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != pred.shape:
            raise ValidationError(f"extent mismatch: weights {w.shape} vs pred {pred.shape}")
    return pred, gt, w


def dice_coefficient(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray | None = None,
                     eps: float = DEFAULT_EPS) -> float:
    """Weighted soft Dice overlap: (2*sum(w*p*y) + eps) / (sum(w*p) + sum(w*y) + eps).

    With all-ones weights this is the plain soft Dice coefficient; eps > 0
    resolves the empty/empty case to 1 (perfect agreement).
    """
    pred, gt, w = _check_triple(pred, gt, weights)
    num = 2.0 * float(np.sum(w * pred * gt)) + eps
    den = float(np.sum(w * pred)) + float(np.sum(w * gt)) + eps
    if den == 0.0:
        raise ValidationError("dice denominator is zero; use eps > 0 for possibly-empty masks")
    return num / den


def dice_loss(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray | None = None,
              eps: float = DEFAULT_EPS) -> float:
    """Dice dissimilarity, 1 - dice_coefficient."""
    return 1.0 - dice_coefficient(pred, gt, weights, eps)


def dice_loss_gradient(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray | None = None,
                       eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel gradient of dice_loss with respect to pred.

    With num = 2*sum(w*p*y) + eps and den = sum(w*p) + sum(w*y) + eps,
    d(loss)/dp_i = -(2*w_i*y_i*den - num*w_i) / den^2.
    """
    pred, gt, w = _check_triple(pred, gt, weights)
    num = 2.0 * np.sum(w * pred * gt) + eps
    den = np.sum(w * pred) + np.sum(w * gt) + eps
    if den == 0.0:
        raise ValidationError("dice denominator is zero; use eps > 0 for possibly-empty masks")
    grad = -(2.0 * w * gt * den - num * w) / (den * den)
    _check_finite(grad, "dice_loss")
    return grad


def cbce_loss(pred: np.ndarray, gt: np.ndarray, clip: float = CBCE_CLIP) -> float:
    """Class-balanced cross-entropy with per-image weight beta = #neg / N.

    Probabilities are clamped into [clip, 1-clip] before the logs.  Masks
    containing a single class degenerate beta to 1 or 0; the loss is still
    computed, with a logged warning, and the vanished term contributes zero.
    """
    pred, gt, _ = _check_triple(pred, gt, None)
    n = pred.size
    beta = float(np.sum(gt == 0)) / n
    if beta in (0.0, 1.0):
        log.warning("cbce_loss: mask contains a single class, beta=%g", beta)
    p = np.clip(pred, clip, 1.0 - clip)
    terms = beta * gt * np.log(p) + (1.0 - beta) * (1.0 - gt) * np.log(1.0 - p)
    return float(-np.sum(terms) / n)


def cbce_gradient(pred: np.ndarray, gt: np.ndarray, clip: float = CBCE_CLIP) -> np.ndarray:
    """Per-pixel gradient of cbce_loss; zero where the clamp is active."""
    pred, gt, _ = _check_triple(pred, gt, None)
    n = pred.size
    beta = float(np.sum(gt == 0)) / n
    p = np.clip(pred, clip, 1.0 - clip)
    grad = -(beta * gt / p - (1.0 - beta) * (1.0 - gt) / (1.0 - p)) / n
    grad[(pred < clip) | (pred > 1.0 - clip)] = 0.0
    _check_finite(grad, "cbce_loss")
    return grad


def _check_finite(grad: np.ndarray, name: str) -> None:
    finite = np.isfinite(grad)
    if not finite.all():
        where = tuple(int(v) for v in np.argwhere(~finite)[0])
        raise ValidationError(f"{name} gradient is non-finite at pixel {where}")


def modulation_alpha(epoch: int, epoch_max: int) -> float:
    """Branch modulation weight 1 - (epoch / epoch_max)^2, decaying 1 -> 0."""
    if epoch_max < 1:
        raise ValidationError(f"epoch_max must be >= 1, got {epoch_max}")
    if not (0 <= epoch <= epoch_max):
        raise ValidationError(f"epoch must lie in [0, {epoch_max}], got {epoch}")
    return 1.0 - (epoch / epoch_max) ** 2


@dataclass
class ModulationSchedule:
    """Epoch horizon plus which branch the decaying weight is attached to.

    'text' (default) puts the decaying weight on the large-lesion branch so
    the easy task dominates early; 'printed-eq5' is the transposed form.
    """

    epoch_max: int
    orientation: str = "text"

    def __post_init__(self) -> None:
        if self.epoch_max < 1:
            raise ValidationError(f"epoch_max must be >= 1, got {self.epoch_max}")
        if self.orientation not in ORIENTATIONS:
            raise ValidationError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")

    def weights(self, epoch: int) -> tuple[float, float, float]:
        """Return (alpha, weight on large branch, weight on small branch)."""
        alpha = modulation_alpha(epoch, self.epoch_max)
        if self.orientation == "text":
            return alpha, alpha, 1.0 - alpha
        return alpha, 1.0 - alpha, alpha


@dataclass
class LossBreakdown:
    """Per-iteration loss record: the two branch losses and their blend."""

    large_branch: float
    small_branch: float
    alpha: float
    total: float

    def log_fields(self) -> dict:
        return {"alpha": self.alpha, "L_L": self.large_branch,
                "L_S": self.small_branch, "total": self.total}


def dsm_loss(pred_large: np.ndarray, gt_large: np.ndarray, weights_large: np.ndarray,
             pred_small: np.ndarray, gt_small: np.ndarray, weights_small: np.ndarray,
             epoch: int, schedule: ModulationSchedule, eps: float = DEFAULT_EPS) -> LossBreakdown:
    """Combine the two branch Dice losses under the epoch-modulated weight."""
    loss_large = dice_loss(pred_large, gt_large, weights_large, eps)
    loss_small = dice_loss(pred_small, gt_small, weights_small, eps)
    alpha, w_large, w_small = schedule.weights(epoch)
    total = w_large * loss_large + w_small * loss_small
    return LossBreakdown(loss_large, loss_small, alpha, total)


def dsm_loss_gradients(pred_large: np.ndarray, gt_large: np.ndarray, weights_large: np.ndarray,
                       pred_small: np.ndarray, gt_small: np.ndarray, weights_small: np.ndarray,
                       epoch: int, schedule: ModulationSchedule,
                       eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the combined loss with respect to each branch prediction."""
    _, w_large, w_small = schedule.weights(epoch)
    grad_large = w_large * dice_loss_gradient(pred_large, gt_large, weights_large, eps)
    grad_small = w_small * dice_loss_gradient(pred_small, gt_small, weights_small, eps)
    return grad_large, grad_small
