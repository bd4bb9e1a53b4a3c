"""Shared value types: images, binary masks, probability masks, manifests.

Arrays are plain numpy: images are float64 (H, W, 3) in [0, 1], binary masks
uint8 (H, W) in {0, 1}, probability masks float64 (H, W) in [0, 1].  The
validators below are the single place where those conventions are enforced;
every other module assumes validated inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCE_TAGS = ("DDR", "IDRiD", "SYNTH")


class ValidationError(ValueError):
    """Raised when an image, mask or manifest violates its invariants."""


def _where_first(bad: np.ndarray) -> tuple:
    idx = np.argwhere(bad)
    return tuple(int(v) for v in idx[0])


def validate_image(image: np.ndarray, path: str | None = None) -> np.ndarray:
    """Check an (H, W, 3) float image with finite values in [0, 1]."""
    tag = f" in {path}" if path else ""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"image{tag} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"image{tag} has empty extent {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    finite = np.isfinite(arr)
    if not finite.all():
        raise ValidationError(f"image{tag} has non-finite value at {_where_first(~finite)}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        bad = (arr < 0.0) | (arr > 1.0)
        raise ValidationError(f"image{tag} has value outside [0, 1] at {_where_first(bad)}")
    return arr


def validate_mask(mask: np.ndarray, path: str | None = None) -> np.ndarray:
    """Check an (H, W) mask whose values are exactly 0 or 1."""
    tag = f" in {path}" if path else ""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"mask{tag} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"mask{tag} has empty extent {arr.shape}")
    vals = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ValidationError(f"mask{tag} has non-finite value at {_where_first(~np.isfinite(vals))}")
    bad = (vals != 0.0) & (vals != 1.0)
    if bad.any():
        y, x = _where_first(bad)
        raise ValidationError(f"mask{tag} has non-binary value {vals[y, x]!r} at ({y}, {x})")
    return arr.astype(np.uint8, copy=False) if arr.dtype != np.uint8 else arr


def validate_probability(prob: np.ndarray, path: str | None = None) -> np.ndarray:
    """Check an (H, W) probability mask with finite values in [0, 1]."""
    tag = f" in {path}" if path else ""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"probability mask{tag} must be 2-D, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        raise ValidationError(f"probability mask{tag} has non-finite value at {_where_first(~finite)}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        bad = (arr < 0.0) | (arr > 1.0)
        raise ValidationError(f"probability mask{tag} has value outside [0, 1] at {_where_first(bad)}")
    return arr


def validate_pair(image: np.ndarray, mask: np.ndarray, path: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Validate an image/mask pair and check that their extents match."""
    img = validate_image(image, path)
    msk = validate_mask(mask, path)
    if img.shape[:2] != msk.shape:
        tag = f" in {path}" if path else ""
        raise ValidationError(
            f"extent mismatch{tag}: image {img.shape[:2]} vs mask {msk.shape}"
        )
    return img, msk


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability mask: output is 1 where prob >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    arr = validate_probability(prob)
    return (arr >= threshold).astype(np.uint8)


def mask_from_u8(raw: np.ndarray) -> np.ndarray:
    """Map an 8-bit single-channel mask image to {0, 1}: any value > 127 is 1."""
    arr = np.asarray(raw)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8)


@dataclass
class DatasetManifest:
    """A named split: (image path, mask path) pairs plus a source tag."""

    split: str
    entries: list[tuple[Path, Path]] = field(default_factory=list)
    source: str = "SYNTH"

    def __post_init__(self) -> None:
        if self.source not in SOURCE_TAGS:
            raise ValidationError(f"source must be one of {SOURCE_TAGS}, got {self.source!r}")

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: str | Path, split: str | None = None, source: str = "SYNTH") -> DatasetManifest:
    """Read a tab-separated manifest; paths are resolved relative to the file.

    Each line is `image_path<TAB>mask_path` in UTF-8.  Missing files are a
    validation error so downstream stages can assume every entry is readable.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    base = path.parent
    entries: list[tuple[Path, Path]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
        img, msk = (base / parts[0]), (base / parts[1])
        for p in (img, msk):
            if not p.is_file():
                raise ValidationError(f"{path}:{lineno}: listed file does not exist: {p}")
        entries.append((img, msk))
    return DatasetManifest(split=split or path.stem, entries=entries, source=source)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest as tab-separated lines with paths relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = []
    for img, msk in manifest.entries:
        lines.append(f"{Path(img).resolve().relative_to(base.resolve())}\t{Path(msk).resolve().relative_to(base.resolve())}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path
