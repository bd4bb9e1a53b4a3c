"""Dual-branch segmentation for extremely class-imbalanced lesion masks.

Two branches with a shared early backbone are trained on differently
sampled pixel multisets of their predictions (uniform vs re-balanced Dice),
blended by an epoch-decaying modulation weight, and evaluated with pixel-
and region-level metrics.
"""

from .backend import BACKEND, HAS_NUMBA
from .core import (
    DatasetManifest,
    ValidationError,
    binarize,
    load_manifest,
    save_manifest,
    validate_image,
    validate_mask,
    validate_pair,
    validate_probability,
)
from .losses import (
    LossBreakdown,
    ModulationSchedule,
    cbce_gradient,
    cbce_loss,
    dice_coefficient,
    dice_loss,
    dice_loss_gradient,
    dsm_loss,
    dsm_loss_gradients,
    modulation_alpha,
)
from .sampling import SamplerConfig, rebalanced_sample, sampler_stats, uniform_sample

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "DatasetManifest",
    "ValidationError",
    "binarize",
    "load_manifest",
    "save_manifest",
    "validate_image",
    "validate_mask",
    "validate_pair",
    "validate_probability",
    "LossBreakdown",
    "ModulationSchedule",
    "cbce_gradient",
    "cbce_loss",
    "dice_coefficient",
    "dice_loss",
    "dice_loss_gradient",
    "dsm_loss",
    "dsm_loss_gradients",
    "modulation_alpha",
    "SamplerConfig",
    "rebalanced_sample",
    "sampler_stats",
    "uniform_sample",
    "__version__",
]
