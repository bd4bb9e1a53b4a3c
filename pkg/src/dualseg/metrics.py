"""Pixel- and region-level evaluation.

Pixel level: confusion counts, sensitivity / positive predictive value /
F-score / IoU, and the area under the precision-recall curve over a fixed
descending threshold grid.  Region level: connected components of prediction
and ground truth are matched by overlap ratio against a threshold sigma, and
whole components are promoted to true-positive pixels when their ratio
clears it; the resulting TP/FP/FN pixel sets give an F-score per sigma.

Raw TP/FP/FN sets can overlap (a mostly-covered ground-truth component also
satisfies the miss condition), so they are resolved with precedence
TP > FP > FN, the only reading under which a perfect prediction scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ValidationError, validate_mask, validate_probability
from .kernels import label_components

FN_MODES = ("literal", "corrected-fn")
DEFAULT_SIGMAS = (0.2, 0.35, 0.5, 0.65, 0.8)
DEFAULT_PR_THRESHOLDS = 256


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Partition foreground into maximal connected pixel sets.

    Returns one sorted array of flat pixel indices per component.
    """
    mask = validate_mask(mask)
    labels, count = label_components(mask, connectivity)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    bounds = np.searchsorted(sorted_labels, np.arange(1, count + 2))
    return [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(count)]


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def pixel_confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Per-pixel confusion counts between two binary masks."""
    pred = validate_mask(pred)
    gt = validate_mask(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class PixelScores:
    sn: float
    ppv: float
    f: float
    iou: float


def pixel_scores(c: ConfusionCounts) -> PixelScores:
    """SN, PPV, F and IoU from confusion counts; any 0/0 scores 0."""
    sn = _safe_div(c.tp, c.tp + c.fn)
    ppv = _safe_div(c.tp, c.tp + c.fp)
    f = _safe_div(2.0 * sn * ppv, sn + ppv)
    iou = _safe_div(c.tp, c.tp + c.fp + c.fn)
    return PixelScores(sn, ppv, f, iou)


def f_score(sn: float, ppv: float) -> float:
    """Harmonic mean of sensitivity and positive predictive value."""
    return _safe_div(2.0 * sn * ppv, sn + ppv)


# ---------------------------------------------------------------------------
# precision-recall / AUPR
# ---------------------------------------------------------------------------

def default_pr_thresholds(n: int = DEFAULT_PR_THRESHOLDS) -> np.ndarray:
    """n evenly spaced thresholds over [0, 1], descending."""
    return np.linspace(1.0, 0.0, n)


def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size < 2:
        raise ValidationError("need at least 2 thresholds")
    if not np.all(np.diff(t) < 0):
        raise ValidationError("thresholds must be strictly descending")
    return t


class PrAccumulator:
    """Pools pixel scores across images for one precision-recall curve."""

    def __init__(self, thresholds=None):
        self.thresholds = _check_thresholds(
            thresholds if thresholds is not None else default_pr_thresholds())
        k = self.thresholds.size
        self.tp = np.zeros(k, dtype=np.int64)
        self.fp = np.zeros(k, dtype=np.int64)
        self.n_pos = 0
        self.n_neg = 0

    def add(self, prob: np.ndarray, gt: np.ndarray) -> None:
        prob = validate_probability(prob)
        gt = validate_mask(gt)
        if prob.shape != gt.shape:
            raise ValidationError(f"extent mismatch: prob {prob.shape} vs gt {gt.shape}")
        pos = np.sort(prob[gt == 1], kind="stable")
        neg = np.sort(prob[gt == 0], kind="stable")
        # count of scores >= t for each threshold
        self.tp += pos.size - np.searchsorted(pos, self.thresholds, side="left")
        self.fp += neg.size - np.searchsorted(neg, self.thresholds, side="left")
        self.n_pos += pos.size
        self.n_neg += neg.size

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        """(recall, precision) points in descending-threshold order, prefixed
        with the (0, 1) anchor; zero-prediction thresholds are dropped."""
        if self.n_pos == 0:
            raise ValidationError("AUPR is undefined: no positive pixels in ground truth")
        keep = (self.tp + self.fp) > 0
        recall = self.tp[keep] / self.n_pos
        precision = self.tp[keep] / (self.tp[keep] + self.fp[keep])
        recall = np.concatenate(([0.0], recall))
        precision = np.concatenate(([1.0], precision))
        return recall, precision

    def area(self) -> float:
        """Area under the curve by recall-step integration.

        Each threshold contributes (R_k - R_{k-1}) * P_k, which reproduces
        the prevalence for uninformative constant scores; a trapezoid
        through the coarse anchored points would not.
        """
        recall, precision = self.curve()
        return float(np.sum(np.diff(recall) * precision[1:]))


def aupr(prob: np.ndarray, gt: np.ndarray, thresholds=None) -> float:
    """Area under the pixel precision-recall curve for one mask pair."""
    acc = PrAccumulator(thresholds)
    acc.add(prob, gt)
    return acc.area()


# ---------------------------------------------------------------------------
# region-level confusion
# ---------------------------------------------------------------------------

@dataclass
class RegionMatchResult:
    """Disjoint TP/FP/FN pixel sets at one overlap threshold."""

    sigma: float
    tp_mask: np.ndarray
    fp_mask: np.ndarray
    fn_mask: np.ndarray
    n_pred_components: int
    n_gt_components: int

    @property
    def tp(self) -> int:
        return int(self.tp_mask.sum())

    @property
    def fp(self) -> int:
        return int(self.fp_mask.sum())

    @property
    def fn(self) -> int:
        return int(self.fn_mask.sum())


def region_confusion(pred: np.ndarray, gt: np.ndarray, sigma: float,
                     connectivity: int = 8, fn_mode: str = "literal") -> RegionMatchResult:
    """Component-overlap TP/FP/FN pixel sets at threshold sigma.

    TP pixels: the raw intersection, plus every predicted component whose
    covered fraction |comp & gt| / |comp| exceeds sigma, plus every
    ground-truth component whose covered fraction |pred & comp| / |comp|
    exceeds sigma.  FP pixels: predicted components disjoint from the ground
    truth, plus the background part of predicted components at or below the
    ratio.  FN pixels: ground-truth components untouched by the prediction,
    plus the missed part of ground-truth components whose missed fraction is
    at or below sigma ('literal'); 'corrected-fn' conditions that second set
    on the covered fraction instead, mirroring the FP rule.  Raw sets are
    then made disjoint with precedence TP > FP > FN, and everything else is
    a true negative.
    """
    if not (0.0 <= sigma <= 1.0):
        raise ValidationError(f"sigma must lie in [0, 1], got {sigma}")
    if fn_mode not in FN_MODES:
        raise ValidationError(f"fn_mode must be one of {FN_MODES}, got {fn_mode!r}")
    pred = validate_mask(pred)
    gt = validate_mask(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")

    pred_fg = pred.astype(bool)
    gt_fg = gt.astype(bool)
    inter = pred_fg & gt_fg

    pred_labels, n_pred = label_components(pred, connectivity)
    gt_labels, n_gt = label_components(gt, connectivity)

    pred_sizes = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)
    gt_sizes = np.bincount(gt_labels.ravel(), minlength=n_gt + 1)
    pred_overlap = np.bincount(pred_labels[inter].ravel(), minlength=n_pred + 1)
    gt_overlap = np.bincount(gt_labels[inter].ravel(), minlength=n_gt + 1)

    pred_ratio = pred_overlap / np.maximum(pred_sizes, 1)
    gt_ratio = gt_overlap / np.maximum(gt_sizes, 1)
    pred_ratio[0] = 0.0
    gt_ratio[0] = 0.0

    pred_promoted = (pred_ratio > sigma)
    pred_promoted[0] = False
    gt_promoted = (gt_ratio > sigma)
    gt_promoted[0] = False
    tp_raw = inter | pred_promoted[pred_labels] | gt_promoted[gt_labels]

    pred_disjoint = (pred_overlap == 0) & (pred_sizes > 0)
    pred_disjoint[0] = False
    pred_low = (pred_ratio <= sigma) & (pred_sizes > 0)
    pred_low[0] = False
    fp_raw = pred_disjoint[pred_labels] | (pred_low[pred_labels] & ~gt_fg & pred_fg)

    gt_disjoint = (gt_overlap == 0) & (gt_sizes > 0)
    gt_disjoint[0] = False
    if fn_mode == "literal":
        missed_ratio = np.where(gt_sizes > 0, (gt_sizes - gt_overlap) / np.maximum(gt_sizes, 1), 1.0)
        gt_partial = (missed_ratio <= sigma) & (gt_sizes > 0)
    else:
        gt_partial = (gt_ratio <= sigma) & (gt_sizes > 0)
    gt_partial[0] = False
    fn_raw = gt_disjoint[gt_labels] | (gt_partial[gt_labels] & ~pred_fg & gt_fg)

    fp_mask = fp_raw & ~tp_raw
    fn_mask = fn_raw & ~tp_raw & ~fp_mask
    return RegionMatchResult(sigma, tp_raw, fp_mask, fn_mask, n_pred, n_gt)


@dataclass
class RegionScores:
    sn: float
    ppv: float
    f: float


def region_f_score(result: RegionMatchResult) -> RegionScores:
    """Sensitivity, PPV and F over the region-matched pixel sets."""
    sn = _safe_div(result.tp, result.tp + result.fn)
    ppv = _safe_div(result.tp, result.tp + result.fp)
    return RegionScores(sn, ppv, f_score(sn, ppv))


def split_components_by_area(mask: np.ndarray, area_cutoff: int,
                             connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Split a mask into (components below cutoff, components at/above it)."""
    mask = validate_mask(mask)
    labels, count = label_components(mask, connectivity)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    small = (sizes < area_cutoff)
    small[0] = False
    small_mask = small[labels].astype(np.uint8)
    large_mask = (mask.astype(bool) & ~small[labels]).astype(np.uint8)
    return small_mask, large_mask


# ---------------------------------------------------------------------------
# dataset-level report
# ---------------------------------------------------------------------------

def evaluate_dataset(pairs, sigmas=DEFAULT_SIGMAS, threshold: float = 0.5,
                     pr_thresholds=None, connectivity: int = 8,
                     fn_mode: str = "literal", region_pooling: str = "dataset") -> dict:
    """Score decoded (probability, ground truth) pairs for a whole split.

    Pixel confusion and AUPR pool pixels across the dataset; region scores
    pool TP/FP/FN pixel counts ('dataset', default) or average per-image
    F-scores ('per-image').  Returns a JSON-ready report with dataset fields
    SN_pixel, PPV_pixel, F_pixel, IoU, AUPR and F_sigma plus a per-image
    breakdown and the pooled precision-recall curve.
    """
    if region_pooling not in ("dataset", "per-image"):
        raise ValidationError(f"region_pooling must be 'dataset' or 'per-image', got {region_pooling!r}")
    sigmas = [float(s) for s in sigmas]
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no prediction/ground-truth pairs to evaluate")

    acc = PrAccumulator(pr_thresholds)
    pooled = ConfusionCounts(0, 0, 0, 0)
    region_totals = {s: [0, 0, 0] for s in sigmas}
    per_image = []

    for idx, (prob, gt) in enumerate(pairs):
        prob = validate_probability(prob)
        gt = validate_mask(gt)
        if prob.shape != gt.shape:
            raise ValidationError(f"pair {idx}: extent mismatch {prob.shape} vs {gt.shape}")
        acc.add(prob, gt)
        pred = (prob >= threshold).astype(np.uint8)
        c = pixel_confusion(pred, gt)
        pooled.tp += c.tp
        pooled.fp += c.fp
        pooled.fn += c.fn
        pooled.tn += c.tn
        scores = pixel_scores(c)
        entry = {
            "index": idx,
            "SN_pixel": scores.sn,
            "PPV_pixel": scores.ppv,
            "F_pixel": scores.f,
            "IoU": scores.iou,
            "F_sigma": {},
        }
        for s in sigmas:
            r = region_confusion(pred, gt, s, connectivity, fn_mode)
            region_totals[s][0] += r.tp
            region_totals[s][1] += r.fp
            region_totals[s][2] += r.fn
            entry["F_sigma"][f"{s:g}"] = region_f_score(r).f
        per_image.append(entry)

    pooled_scores = pixel_scores(pooled)
    f_sigma = {}
    for s in sigmas:
        if region_pooling == "dataset":
            tp, fp, fn = region_totals[s]
            sn = _safe_div(tp, tp + fn)
            ppv = _safe_div(tp, tp + fp)
            f_sigma[f"{s:g}"] = f_score(sn, ppv)
        else:
            f_sigma[f"{s:g}"] = float(np.mean([e["F_sigma"][f"{s:g}"] for e in per_image]))

    recall, precision = acc.curve()
    return {
        "SN_pixel": pooled_scores.sn,
        "PPV_pixel": pooled_scores.ppv,
        "F_pixel": pooled_scores.f,
        "IoU": pooled_scores.iou,
        "AUPR": acc.area(),
        "F_sigma": f_sigma,
        "n_images": len(pairs),
        "threshold": threshold,
        "region_pooling": region_pooling,
        "pixel_confusion": {"TP": pooled.tp, "FP": pooled.fp, "FN": pooled.fn, "TN": pooled.tn},
        "pr_curve": {"recall": recall.tolist(), "precision": precision.tolist()},
        "per_image": per_image,
    }
