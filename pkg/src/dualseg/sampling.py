"""Pixel samplers feeding the two branch Dice losses.

A sample is a multiset of pixels encoded as an (H, W) int64 array of draw
counts whose total equals the budget N = H*W.  The uniform sampler passes
every pixel once; the re-balanced sampler draws floor(rate*N) positions with
replacement from foreground pixels and the remainder from background pixels,
so small foreground regions are hit many times over.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ValidationError, validate_mask

log = logging.getLogger(__name__)

FALLBACKS = ("uniform", "all-background")


@dataclass
class SamplerConfig:
    """Re-balanced sampler knobs.

    rate is the foreground share of the draw budget; with
    reverse_class_frequency=True it is replaced per image by the background
    pixel fraction.  zero_positive_fallback selects the behaviour when one
    class is empty and the two-pool draw is undefined.
    """

    rate: float = 0.5
    seed: int = 0
    zero_positive_fallback: str = "uniform"
    reverse_class_frequency: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.rate <= 1.0):
            raise ValidationError(f"sample rate must lie in [0, 1], got {self.rate}")
        if self.zero_positive_fallback not in FALLBACKS:
            raise ValidationError(f"fallback must be one of {FALLBACKS}, got {self.zero_positive_fallback!r}")


def uniform_sample(gt: np.ndarray, stochastic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample every pixel with equal probability.

    The default deterministic form is the identity multiset (count 1
    everywhere), which equals the equal-probability draw in expectation while
    adding no variance.  stochastic=True instead draws N pixels with
    replacement.
    """
    gt = validate_mask(gt)
    n = gt.size
    if not stochastic:
        return np.ones(gt.shape, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng()
    draws = rng.integers(0, n, size=n)
    return np.bincount(draws, minlength=n).reshape(gt.shape).astype(np.int64)


def _fallback_weights(gt: np.ndarray, cfg: SamplerConfig, missing: str) -> np.ndarray:
    log.warning("re-balanced sampler: mask has no %s pixels, falling back to %s weights",
                missing, cfg.zero_positive_fallback)
    if cfg.zero_positive_fallback == "uniform":
        return np.ones(gt.shape, dtype=np.int64)
    # all-background: spend the whole budget on the one non-empty pool
    counts = np.zeros(gt.size, dtype=np.int64)
    pool = np.flatnonzero(gt.ravel() == (1 if missing == "background" else 0))
    rng = np.random.default_rng(cfg.seed)
    draws = pool[rng.integers(0, pool.size, size=gt.size)]
    np.add.at(counts, draws, 1)
    return counts.reshape(gt.shape)


def rebalanced_sample(gt: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Oversample foreground, undersample background, with replacement.

    Exactly floor(rate*N) draws land on foreground pixels and N - floor(rate*N)
    on background pixels (not just in expectation).  Degenerate single-class
    masks use the configured fallback.
    """
    gt = validate_mask(gt)
    n = gt.size
    flat = gt.ravel()
    pos = np.flatnonzero(flat == 1)
    neg = np.flatnonzero(flat == 0)
    if pos.size == 0:
        return _fallback_weights(gt, cfg, "foreground")
    if neg.size == 0:
        return _fallback_weights(gt, cfg, "background")
    rate = (neg.size / n) if cfg.reverse_class_frequency else cfg.rate
    n_pos = int(np.floor(rate * n))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    counts = np.zeros(n, dtype=np.int64)
    if n_pos > 0:
        np.add.at(counts, pos[rng.integers(0, pos.size, size=n_pos)], 1)
    if n - n_pos > 0:
        np.add.at(counts, neg[rng.integers(0, neg.size, size=n - n_pos)], 1)
    return counts.reshape(gt.shape)


def sampler_stats(weights: np.ndarray, gt: np.ndarray) -> tuple[float, int]:
    """Return (foreground draw fraction, max per-pixel count)."""
    gt = validate_mask(gt)
    weights = np.asarray(weights)
    if weights.shape != gt.shape:
        raise ValidationError(f"extent mismatch: weights {weights.shape} vs mask {gt.shape}")
    total = int(weights.sum())
    if total == 0:
        raise ValidationError("sample weights are empty")
    pos_total = int(weights[gt == 1].sum())
    return pos_total / total, int(weights.max())
