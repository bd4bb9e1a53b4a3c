"""Dataset ingestion, preprocessing, augmentation, statistics and synthesis.

Images travel as float64 (H, W, 3) in [0, 1], masks as uint8 {0, 1}; on disk
they are 8-bit RGB and single-channel 0/255 PNGs.  The synthetic generator
produces the same regime the real fundus splits exhibit: a dark frame with a
brighter circular field of view, extreme background/foreground imbalance and
a bimodal lesion-size mixture, so the training and evaluation machinery can
be exercised end to end at desk scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    DatasetManifest,
    ValidationError,
    mask_from_u8,
    save_manifest,
    validate_image,
    validate_mask,
    validate_pair,
)
from .kernels import label_components, resize_bilinear, resize_nearest

log = logging.getLogger(__name__)

PREPROCESS_MODES = ("fov-crop-pad-resize", "direct-resize")
AUGMENT_NAMES = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")


class GenerationError(RuntimeError):
    """Raised when a synthetic dataset request cannot be satisfied."""


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return validate_image(arr, str(path))


def load_mask(path: str | Path) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    return validate_mask(mask_from_u8(raw), str(path))


def save_image(image: np.ndarray, path: str | Path) -> None:
    image = validate_image(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = validate_mask(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def load_pair(image_path: str | Path, mask_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return validate_pair(load_image(image_path), load_mask(mask_path), str(image_path))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessSpec:
    """How raw pairs are brought to the network extent.

    'fov-crop-pad-resize' crops the detected field-of-view box, zero-pads
    the short side up to the long side when it is below the target side,
    then resizes to the (square) target.  'direct-resize' just resizes.
    """

    mode: str = "direct-resize"
    target: tuple[int, int] = (64, 64)  # (height, width)
    fov_threshold: float = 10.0 / 255.0

    def __post_init__(self) -> None:
        if self.mode not in PREPROCESS_MODES:
            raise ValidationError(f"mode must be one of {PREPROCESS_MODES}, got {self.mode!r}")
        if self.target[0] < 1 or self.target[1] < 1:
            raise ValidationError(f"target extent must be positive, got {self.target}")


def detect_fov_bbox(image: np.ndarray, threshold: float = 10.0 / 255.0) -> tuple[int, int, int, int]:
    """Tight (top, left, height, width) box of the largest bright region.

    Brightness is the per-pixel channel maximum compared against the
    threshold; if nothing clears it the full frame is returned with a
    warning.
    """
    image = validate_image(image)
    bright = (image.max(axis=2) > threshold).astype(np.uint8)
    labels, count = label_components(bright, connectivity=8)
    if count == 0:
        log.warning("detect_fov_bbox: no pixel above threshold %g, using full frame", threshold)
        return 0, 0, image.shape[0], image.shape[1]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = 0
    main = int(np.argmax(sizes))
    rows, cols = np.nonzero(labels == main)
    top, left = int(rows.min()), int(cols.min())
    return top, left, int(rows.max()) - top + 1, int(cols.max()) - left + 1


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = resize_bilinear(image.transpose(2, 0, 1), out_h, out_w).transpose(1, 2, 0)
    return np.clip(out, 0.0, 1.0)


def _resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return (resize_nearest(mask, out_h, out_w) > 0).astype(np.uint8)


def _pad_to_square(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    img = np.zeros((side, side, 3), dtype=image.dtype)
    msk = np.zeros((side, side), dtype=mask.dtype)
    img[top:top + h, left:left + w] = image
    msk[top:top + h, left:left + w] = mask
    return img, msk


def preprocess(image: np.ndarray, mask: np.ndarray, spec: PreprocessSpec) -> tuple[np.ndarray, np.ndarray]:
    """Bring a validated pair to the configured extent.

    The image is resized bilinearly, the mask with nearest neighbour and
    re-binarized, so outputs always satisfy the pair invariants.
    """
    image, mask = validate_pair(image, mask)
    th, tw = spec.target
    if spec.mode == "fov-crop-pad-resize":
        top, left, h, w = detect_fov_bbox(image, spec.fov_threshold)
        image = image[top:top + h, left:left + w]
        mask = mask[top:top + h, left:left + w]
        if min(h, w) < min(th, tw) and h != w:
            image, mask = _pad_to_square(image, mask)
    return _resize_image(image, th, tw), _resize_mask(mask, th, tw)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment_pair(image: np.ndarray, mask: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply one named isometry identically to image and mask."""
    if name == "identity":
        return image, mask
    if name == "rot90":
        return np.rot90(image, 1, axes=(0, 1)).copy(), np.rot90(mask, 1).copy()
    if name == "rot180":
        return np.rot90(image, 2, axes=(0, 1)).copy(), np.rot90(mask, 2).copy()
    if name == "rot270":
        return np.rot90(image, 3, axes=(0, 1)).copy(), np.rot90(mask, 3).copy()
    if name == "hflip":
        return image[:, ::-1].copy(), mask[:, ::-1].copy()
    if name == "vflip":
        return image[::-1].copy(), mask[::-1].copy()
    raise ValidationError(f"unknown augmentation {name!r}")


def augment(image: np.ndarray, mask: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The fixed six-fold expansion: identity, three rotations, two flips."""
    return [augment_pair(image, mask, name) for name in AUGMENT_NAMES]


# ---------------------------------------------------------------------------
# split statistics
# ---------------------------------------------------------------------------

@dataclass
class DatasetStats:
    ratio_neg_pos: float
    size_large: float
    size_small: float
    n_images: int
    n_components: int

    def to_json(self) -> dict:
        return {
            "ratio_neg_pos": self.ratio_neg_pos,
            "size_large": self.size_large,
            "size_small": self.size_small,
            "n_images": self.n_images,
            "n_components": self.n_components,
        }


def dataset_stats(manifest: DatasetManifest, connectivity: int = 8,
                  pixel_weighted: bool = True) -> DatasetStats:
    """Background/foreground ratio and component-size percentiles.

    Component sizes are areas relative to their image; the default
    pixel-weighted distribution gives each foreground pixel its component's
    relative area, so size_large/size_small are the relative areas below
    which the top/bottom 10% of foreground pixels (or components, when
    pixel_weighted=False) fall.
    """
    total_px = 0
    total_fg = 0
    values: list[np.ndarray] = []
    n_components = 0
    for _, mask_path in manifest.entries:
        mask = load_mask(mask_path)
        total_px += mask.size
        total_fg += int(mask.sum())
        labels, count = label_components(mask, connectivity)
        n_components += count
        if count:
            sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
            rel = sizes / mask.size
            values.append(np.repeat(rel, sizes) if pixel_weighted else rel)
    if total_fg == 0:
        raise ValidationError("dataset has no foreground pixels; ratio undefined")
    all_values = np.concatenate(values)
    return DatasetStats(
        ratio_neg_pos=(total_px - total_fg) / total_fg,
        size_large=float(np.percentile(all_values, 90)),
        size_small=float(np.percentile(all_values, 10)),
        n_images=len(manifest.entries),
        n_components=n_components,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _ellipse_pixels(rng: np.random.Generator, area: float, extent: tuple[int, int],
                    center: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of a randomly oriented ellipse of roughly `area`."""
    h, w = extent
    radius = np.sqrt(max(area, 1.0) / np.pi)
    stretch = rng.uniform(0.8, 1.4)
    ax_a = max(radius * stretch, 0.5)
    ax_b = max(radius / stretch, 0.5)
    theta = rng.uniform(0.0, np.pi)
    cy, cx = center
    r = int(np.ceil(max(ax_a, ax_b))) + 1
    ys = np.arange(max(0, int(cy) - r), min(h, int(cy) + r + 1))
    xs = np.arange(max(0, int(cx) - r), min(w, int(cx) + r + 1))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dy = yy - cy
    dx = xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax_a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ax_b
    inside = (u * u + v * v) <= 1.0
    if not inside.any():
        # sub-pixel ellipse between pixel centres: paint the nearest pixel
        cyi = min(max(int(round(cy)), 0), h - 1)
        cxi = min(max(int(round(cx)), 0), w - 1)
        return np.array([cyi]), np.array([cxi])
    return yy[inside], xx[inside]


def _place_blob(rng: np.random.Generator, occupied: np.ndarray, area: float,
                fov_center: tuple[float, float], fov_radius: float,
                margin: int = 1, tries: int = 200) -> tuple[np.ndarray, np.ndarray] | None:
    """Find a free spot inside the field of view; None if it will not fit."""
    h, w = occupied.shape
    for _ in range(tries):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = fov_radius * 0.82 * np.sqrt(rng.uniform())
        cy = fov_center[0] + rad * np.sin(ang)
        cx = fov_center[1] + rad * np.cos(ang)
        ys, xs = _ellipse_pixels(rng, area, (h, w), (cy, cx))
        if ys.size == 0:
            continue
        y0, y1 = max(ys.min() - margin, 0), min(ys.max() + margin + 1, h)
        x0, x1 = max(xs.min() - margin, 0), min(xs.max() + margin + 1, w)
        if occupied[y0:y1, x0:x1].any():
            continue
        return ys, xs
    return None


def synth_generate(out_dir: str | Path, n_images: int, extent: tuple[int, int] = (64, 64),
                   imbalance_ratio: float = 500.0, large_fraction: float = 0.1,
                   small_area: tuple[int, int] = (1, 5), large_area: tuple[int, int] = (80, 160),
                   distractors: int = 2, seed: int = 0,
                   split: str = "train") -> DatasetManifest:
    """Write a synthetic lesion-segmentation split and its manifest.

    Bright elliptical blobs on a noisy dark disc; component areas come from
    a bimodal mixture (a `large_fraction` share of components from
    `large_area`, the rest from `small_area`, an ~50x area spread at the
    defaults) and blobs are added until the total foreground matches the
    requested background/foreground ratio within 10%.  Dim distractor blobs
    are painted into the image but never into the mask.  Everything is
    drawn from (seed, image-index) streams, so reruns are byte-identical.
    """
    if n_images < 1:
        raise GenerationError("need at least one image")
    if imbalance_ratio < 1.0:
        raise GenerationError(f"imbalance ratio must be >= 1, got {imbalance_ratio}")
    h, w = extent
    out_dir = Path(out_dir)
    plan_rng = np.random.default_rng([seed, 0])
    total_px = n_images * h * w
    target_fg = total_px / (1.0 + imbalance_ratio)
    if target_fg < n_images:
        raise GenerationError(
            f"ratio {imbalance_ratio} leaves under one foreground pixel per image at {h}x{w}")

    fov_radius = 0.47 * min(h, w)
    fov_center = (h / 2.0, w / 2.0)
    yy, xx = np.mgrid[0:h, 0:w]
    fov_mask = ((yy - fov_center[0]) ** 2 + (xx - fov_center[1]) ** 2) <= fov_radius ** 2

    masks = [np.zeros((h, w), dtype=np.uint8) for _ in range(n_images)]
    image_rngs = [np.random.default_rng([seed, 1, idx]) for idx in range(n_images)]
    painted = 0

    def add_component(idx: int, lo: int, hi: int) -> bool:
        rng = image_rngs[idx]
        area = int(rng.integers(lo, hi + 1))
        spot = _place_blob(rng, masks[idx], area, fov_center, fov_radius)
        if spot is None:
            return False
        ys, xs = spot
        masks[idx][ys, xs] = 1
        return True

    # one small component everywhere so no mask is empty
    for idx in range(n_images):
        if not add_component(idx, *small_area):
            raise GenerationError(f"could not place an initial blob in image {idx}")
    painted = sum(int(m.sum()) for m in masks)

    stalls = 0
    while painted < target_fg * 0.97 and stalls < 50 * n_images:
        idx = int(plan_rng.integers(0, n_images))
        want_large = plan_rng.uniform() < large_fraction
        lo, hi = large_area if want_large else small_area
        if want_large and painted + (lo + hi) / 2.0 > target_fg * 1.08:
            lo, hi = small_area
        before = int(masks[idx].sum())
        if add_component(idx, lo, hi):
            painted += int(masks[idx].sum()) - before
        else:
            stalls += 1
    achieved = (total_px - painted) / painted
    if abs(achieved - imbalance_ratio) > 0.1 * imbalance_ratio:
        raise GenerationError(
            f"achieved ratio {achieved:.1f} misses requested {imbalance_ratio} by more than 10%")

    entries = []
    for idx in range(n_images):
        rng = image_rngs[idx]
        image = rng.normal(0.02, 0.008, size=(h, w, 3))
        disc = rng.normal(0.16, 0.025, size=(h, w, 3))
        image[fov_mask] = disc[fov_mask]
        # dim distractor blobs: visible structure that stays out of the mask
        occupied = masks[idx].copy()
        for _ in range(distractors):
            area = int(rng.integers(3, 10))
            spot = _place_blob(rng, occupied, area, fov_center, fov_radius, margin=2)
            if spot is None:
                continue
            ys, xs = spot
            occupied[ys, xs] = 1
            image[ys, xs] = rng.normal(0.42, 0.03, size=(ys.size, 3))
        ys, xs = np.nonzero(masks[idx])
        base = rng.uniform(0.72, 0.92)
        image[ys, xs] = base + rng.normal(0.0, 0.03, size=(ys.size, 3))
        image = np.clip(image, 0.0, 1.0)

        img_path = out_dir / "images" / f"img_{idx:04d}.png"
        msk_path = out_dir / "masks" / f"msk_{idx:04d}.png"
        save_image(image, img_path)
        save_mask(masks[idx], msk_path)
        entries.append((img_path, msk_path))

    manifest = DatasetManifest(split=split, entries=entries, source="SYNTH")
    save_manifest(manifest, out_dir / f"{split}.tsv")
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    """Decode every pair and check the mask/image invariants."""
    for img_path, msk_path in manifest.entries:
        load_pair(img_path, msk_path)
