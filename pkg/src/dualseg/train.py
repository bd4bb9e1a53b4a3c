"""Training loop, checkpointing and evaluation driver.

Each iteration fetches two independent training pairs, pushes one through
the large-lesion branch and one through the small-lesion branch, samples
pixel weights (identity for the large stream, re-balanced for the small
stream), combines the branch Dice losses under the epoch schedule and takes
one SGD step at the poly-decayed learning rate.  Single-branch baseline
modes (plain Dice, class-balanced cross-entropy) reuse the same loop with
the large stream only.

Everything stochastic draws from named substreams of the config seed, and a
checkpoint stores parameters, normalization buffers, momentum, counters and
the exact generator states, so single-threaded runs are byte-reproducible
and resumption is bit-exact.
"""

from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .core import DatasetManifest, ValidationError, load_manifest
from .data import PreprocessSpec, AUGMENT_NAMES, augment_pair, load_pair, preprocess
from .losses import (
    LossBreakdown,
    ModulationSchedule,
    cbce_gradient,
    cbce_loss,
    dice_loss,
    dice_loss_gradient,
    dsm_loss,
    dsm_loss_gradients,
)
from .nn import (
    BackboneSpec,
    DualBranchNet,
    SegmentationNet,
    build_dual_branch,
    build_single_branch,
    tinyseg_spec,
)
from .sampling import SamplerConfig, rebalanced_sample, uniform_sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("dual-dsm", "single-dice", "single-cbce")

BACKBONES = {"tinyseg": tinyseg_spec}


class TrainingAbort(RuntimeError):
    """Raised when a non-finite loss stops training; carries provenance."""

    def __init__(self, message: str, iteration: int, epoch: int, item_ids: list[str]):
        super().__init__(message)
        self.iteration = iteration
        self.epoch = epoch
        self.item_ids = item_ids


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    mode: str = "dual-dsm"
    train_manifest: str = ""
    backbone: str = "tinyseg"
    share_depth: int = 4
    preprocess_mode: str = "direct-resize"
    input_height: int = 64
    input_width: int = 64
    fov_threshold: float = 10.0 / 255.0
    augment: bool = False
    base_lr: float = 0.03
    lr_power: float = 0.9
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 100
    pairs_per_iteration: int = 1
    sample_rate: float = 0.5
    reverse_class_frequency: bool = False
    sampler_fallback: str = "uniform"
    stochastic_uniform: bool = False
    schedule_orientation: str = "text"
    eps: float = 1e-6
    binarize_threshold: float = 0.5
    seed: int = 0
    image_cache: int = 64

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backbone not in BACKBONES:
            raise ValidationError(f"unknown backbone {self.backbone!r}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.pairs_per_iteration not in (1, 2):
            raise ValidationError("pairs_per_iteration must be 1 or 2")
        for name in ("base_lr", "lr_power", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not (0.0 < self.binarize_threshold < 1.0):
            raise ValidationError("binarize_threshold must lie in (0, 1)")
        SamplerConfig(rate=self.sample_rate, seed=self.seed,
                      zero_positive_fallback=self.sampler_fallback,
                      reverse_class_frequency=self.reverse_class_frequency)
        ModulationSchedule(self.epochs, self.schedule_orientation)
        PreprocessSpec(self.preprocess_mode, (self.input_height, self.input_width),
                       self.fov_threshold)

    def preprocess_spec(self) -> PreprocessSpec:
        return PreprocessSpec(self.preprocess_mode,
                              (self.input_height, self.input_width), self.fov_threshold)


def _coerce(raw: str, template) -> object:
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def apply_overrides(cfg: TrainingConfig, overrides: list[str]) -> TrainingConfig:
    """Apply `key=value` strings; unknown keys are rejected."""
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ValidationError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(value.strip(), known[key]))
    cfg.validate()
    return cfg


def save_config(cfg: TrainingConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" if isinstance(getattr(cfg, f.name), str)
             else f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: str | Path) -> TrainingConfig:
    """Read a flat `key = value` file; `#` starts a comment line."""
    cfg = TrainingConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        if isinstance(known[key], str) and len(value) >= 2 and value[0] == value[-1] == "'":
            value = value[1:-1]
        setattr(cfg, key, _coerce(value, known[key]))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def poly_lr(iteration: int, max_iterations: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - iteration/max_iterations) ** power."""
    if not (0 <= iteration <= max_iterations):
        raise ValidationError(f"iteration must lie in [0, {max_iterations}], got {iteration}")
    return base_lr * (1.0 - iteration / max_iterations) ** power


class SgdOptimizer:
    """SGD with momentum; weight decay enters the gradient as wd * param."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads[name] + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

class TrainingData:
    """Deterministic indexed view over a manifest, optionally 6x augmented.

    Item i maps to (image i // n_aug, augmentation i % n_aug); preprocessed
    base pairs are kept in a bounded LRU cache.
    """

    def __init__(self, manifest: DatasetManifest, pspec: PreprocessSpec,
                 augmented: bool, cache_size: int = 64):
        if not manifest.entries:
            raise ValidationError(f"manifest {manifest.split!r} is empty")
        self.manifest = manifest
        self.pspec = pspec
        self.aug_names = AUGMENT_NAMES if augmented else AUGMENT_NAMES[:1]
        self.cache_size = max(cache_size, 1)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.manifest.entries) * len(self.aug_names)

    def item_id(self, i: int) -> str:
        img_idx, aug_idx = divmod(i, len(self.aug_names))
        return f"{Path(self.manifest.entries[img_idx][0]).name}#{self.aug_names[aug_idx]}"

    def _base(self, img_idx: int) -> tuple[np.ndarray, np.ndarray]:
        if img_idx not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            img_path, msk_path = self.manifest.entries[img_idx]
            self._cache[img_idx] = preprocess(*load_pair(img_path, msk_path), self.pspec)
        return self._cache[img_idx]

    def get(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        img_idx, aug_idx = divmod(i, len(self.aug_names))
        image, mask = self._base(img_idx)
        return augment_pair(image, mask, self.aug_names[aug_idx])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _build_net(cfg: TrainingConfig):
    spec: BackboneSpec = BACKBONES[cfg.backbone]()
    if cfg.mode == "dual-dsm":
        return build_dual_branch(spec, cfg.share_depth, cfg.seed)
    return build_single_branch(spec, cfg.seed)


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _set_rng_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state


def save_checkpoint(path: str | Path, net, optimizer: SgdOptimizer, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, arr in sorted(net.named_params().items()):
        arrays[f"param.{name}"] = arr
    for name, arr in sorted(net.named_buffers().items()):
        arrays[f"buffer.{name}"] = arr
    for name, arr in sorted(optimizer.velocity.items()):
        arrays[f"momentum.{name}"] = arr
    meta = dict(meta, format_version=CHECKPOINT_VERSION)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (meta, arrays); raises CheckpointError with version details."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as payload:
            arrays = {k: payload[k] for k in payload.files}
    except (zipfile.BadZipFile, ValueError, OSError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no meta record (expected format {CHECKPOINT_VERSION})")
    try:
        meta = json.loads(bytes(arrays.pop("meta")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} meta is corrupt: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    return meta, arrays


def _restore_arrays(net, optimizer: SgdOptimizer | None, arrays: dict[str, np.ndarray]) -> None:
    targets: dict[str, np.ndarray] = {}
    for name, arr in net.named_params().items():
        targets[f"param.{name}"] = arr
    for name, arr in net.named_buffers().items():
        targets[f"buffer.{name}"] = arr
    if optimizer is not None:
        for name, arr in optimizer.velocity.items():
            targets[f"momentum.{name}"] = arr
    else:
        arrays = {k: v for k, v in arrays.items() if not k.startswith("momentum.")}
    missing = sorted(set(targets) - set(arrays))
    extra = sorted(set(arrays) - set(targets))
    if missing or extra:
        raise CheckpointError(f"checkpoint keys do not match model: missing={missing}, extra={extra}")
    for key, arr in arrays.items():
        if targets[key].shape != arr.shape:
            raise CheckpointError(f"checkpoint array {key} has shape {arr.shape}, expected {targets[key].shape}")
        targets[key][...] = arr


def load_net_from_checkpoint(path: str | Path):
    """Rebuild the network (and its config) stored in a checkpoint."""
    meta, arrays = load_checkpoint(path)
    cfg = TrainingConfig(**meta["config"])
    cfg.validate()
    net = _build_net(cfg)
    _restore_arrays(net, None, arrays)
    return net, cfg, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(cfg: TrainingConfig, out_dir: str | Path,
          resume_from: str | Path | None = None) -> dict:
    """Run the configured optimization; returns paths and final stats.

    Checkpoints land in out_dir/checkpoints/epoch_NNNN.npz after every
    epoch; the iteration log is out_dir/train_log.jsonl with one JSON record
    per iteration (iteration, epoch, alpha, L_L, L_S, total, lr).
    """
    cfg.validate()
    if not cfg.train_manifest:
        raise ValidationError("config has no train_manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.cfg")
    manifest = load_manifest(cfg.train_manifest)
    data = TrainingData(manifest, cfg.preprocess_spec(), cfg.augment, cfg.image_cache)

    net = _build_net(cfg)
    optimizer = SgdOptimizer(net.named_params(), cfg.momentum, cfg.weight_decay)
    schedule = ModulationSchedule(cfg.epochs, cfg.schedule_orientation)
    sampler_cfg = SamplerConfig(rate=cfg.sample_rate, seed=cfg.seed,
                                zero_positive_fallback=cfg.sampler_fallback,
                                reverse_class_frequency=cfg.reverse_class_frequency)
    rng_order = np.random.default_rng([cfg.seed, 10])
    rng_small = np.random.default_rng([cfg.seed, 11])
    rng_pixels = np.random.default_rng([cfg.seed, 12])

    start_epoch = 0
    global_iter = 0
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if meta["config"] != _config_meta(cfg):
            raise CheckpointError("checkpoint config does not match the requested config")
        _restore_arrays(net, optimizer, arrays)
        _set_rng_state(rng_order, meta["rng"]["epoch_order"])
        _set_rng_state(rng_small, meta["rng"]["small_stream"])
        _set_rng_state(rng_pixels, meta["rng"]["pixel_sampler"])
        start_epoch = meta["next_epoch"]
        global_iter = meta["global_iter"]

    n_items = len(data)
    iters_per_epoch = math.ceil(n_items / cfg.pairs_per_iteration)
    max_iterations = cfg.epochs * iters_per_epoch
    ckpt_dir = out_dir / "checkpoints"
    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8")

    last_ckpt = Path(resume_from) if resume_from is not None else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = rng_order.permutation(n_items)
            pos = 0
            for _ in range(iters_per_epoch):
                lr = poly_lr(global_iter, max_iterations, cfg.base_lr, cfg.lr_power)
                take = min(cfg.pairs_per_iteration, n_items - pos)
                item_ids: list[str] = []
                breakdowns: list[LossBreakdown] = []
                scale = 1.0 / take
                for _ in range(take):
                    idx_large = int(order[pos])
                    pos += 1
                    image_large, gt_large = data.get(idx_large)
                    item_ids.append(data.item_id(idx_large))
                    if cfg.mode == "dual-dsm":
                        idx_small = int(rng_small.integers(0, n_items))
                        image_small, gt_small = data.get(idx_small)
                        item_ids.append(data.item_id(idx_small))
                        prob_large, prob_small = net.forward_train(image_large, image_small)
                        weights_large = uniform_sample(gt_large, cfg.stochastic_uniform, rng_pixels)
                        weights_small = rebalanced_sample(gt_small, sampler_cfg, rng_pixels)
                        breakdown = dsm_loss(prob_large, gt_large, weights_large,
                                             prob_small, gt_small, weights_small,
                                             epoch, schedule, cfg.eps)
                        grad_large, grad_small = dsm_loss_gradients(
                            prob_large, gt_large, weights_large,
                            prob_small, gt_small, weights_small, epoch, schedule, cfg.eps)
                        _abort_if_nonfinite(breakdown.total, global_iter, epoch, item_ids)
                        net.backward_train(scale * grad_large, scale * grad_small)
                    else:
                        prob, tape = net.forward(image_large, train=True)
                        if cfg.mode == "single-dice":
                            weights = uniform_sample(gt_large, cfg.stochastic_uniform, rng_pixels)
                            loss = dice_loss(prob, gt_large, weights, cfg.eps)
                            grad = dice_loss_gradient(prob, gt_large, weights, cfg.eps)
                        else:
                            loss = cbce_loss(prob, gt_large)
                            grad = cbce_gradient(prob, gt_large)
                        breakdown = LossBreakdown(loss, float("nan"), float("nan"), loss)
                        _abort_if_nonfinite(loss, global_iter, epoch, item_ids)
                        net.backward(scale * grad, tape)
                    breakdowns.append(breakdown)
                optimizer.step(net.named_grads(), lr)
                for arr in net.named_grads().values():
                    arr[...] = 0.0
                record = {
                    "iteration": global_iter,
                    "epoch": epoch,
                    "lr": lr,
                    "alpha": _mean_or_none([b.alpha for b in breakdowns]),
                    "L_L": _mean_or_none([b.large_branch for b in breakdowns]),
                    "L_S": _mean_or_none([b.small_branch for b in breakdowns]),
                    "total": _mean_or_none([b.total for b in breakdowns]),
                }
                log_file.write(_json_line(record) + "\n")
                global_iter += 1
            log_file.flush()
            meta = {
                "config": _config_meta(cfg),
                "mode": cfg.mode,
                "next_epoch": epoch + 1,
                "global_iter": global_iter,
                "max_iterations": max_iterations,
                "rng": {
                    "epoch_order": _rng_state(rng_order),
                    "small_stream": _rng_state(rng_small),
                    "pixel_sampler": _rng_state(rng_pixels),
                },
            }
            last_ckpt = save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.npz", net, optimizer, meta)
    finally:
        log_file.close()

    return {
        "out_dir": str(out_dir),
        "log": str(log_path),
        "checkpoint": str(last_ckpt),
        "iterations": global_iter,
        "iters_per_epoch": iters_per_epoch,
    }


def _config_meta(cfg: TrainingConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def _mean_or_none(values: list[float]) -> float | None:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return None
    return float(np.mean(finite))


def _abort_if_nonfinite(value: float, iteration: int, epoch: int, item_ids: list[str]) -> None:
    if not math.isfinite(value):
        raise TrainingAbort(
            f"non-finite loss {value} at iteration {iteration} (epoch {epoch}) on {item_ids}",
            iteration, epoch, item_ids)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_predictor(net):
    if isinstance(net, DualBranchNet):
        return net.forward_infer
    if isinstance(net, SegmentationNet):
        return net.predict
    raise ValidationError(f"cannot predict with {type(net).__name__}")


def predict_manifest(net, manifest: DatasetManifest, pspec: PreprocessSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Run averaged inference over a manifest; returns (prob, gt) pairs."""
    predictor = make_predictor(net)
    pairs = []
    for img_path, msk_path in manifest.entries:
        image, mask = preprocess(*load_pair(img_path, msk_path), pspec)
        pairs.append((predictor(image), mask))
    return pairs


def evaluate_checkpoint(checkpoint: str | Path, manifest: DatasetManifest | str | Path,
                        sigmas=metrics.DEFAULT_SIGMAS, threshold: float | None = None,
                        region_pooling: str = "dataset", fn_mode: str = "literal",
                        connectivity: int = 8) -> dict:
    """Load a checkpoint, predict a manifest and produce the metrics report."""
    net, cfg, meta = load_net_from_checkpoint(checkpoint)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    pairs = predict_manifest(net, manifest, cfg.preprocess_spec())
    report = metrics.evaluate_dataset(
        pairs, sigmas=sigmas,
        threshold=cfg.binarize_threshold if threshold is None else threshold,
        connectivity=connectivity, fn_mode=fn_mode, region_pooling=region_pooling)
    report["checkpoint"] = str(checkpoint)
    report["manifest_split"] = manifest.split
    report["trained_epochs"] = meta["next_epoch"]
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_run(cells: list[tuple[str, TrainingConfig]], eval_manifest: DatasetManifest | str | Path,
                 out_dir: str | Path, sigmas=metrics.DEFAULT_SIGMAS) -> dict:
    """Train and evaluate one run per cell; returns the comparison table.

    Cells are (name, config) pairs, trained into out_dir/<name> and scored
    on eval_manifest.  The merged table is written to out_dir/comparison.json
    and a fixed-width text rendering to out_dir/comparison.txt.
    """
    if not cells:
        raise ValidationError("ablation matrix is empty")
    out_dir = Path(out_dir)
    table: dict[str, dict] = {}
    for name, cfg in cells:
        result = train(cfg, out_dir / name)
        report = evaluate_checkpoint(result["checkpoint"], eval_manifest, sigmas=sigmas)
        report_path = out_dir / name / "report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        table[name] = {
            "mode": cfg.mode,
            "sample_rate": cfg.sample_rate,
            "reverse_class_frequency": cfg.reverse_class_frequency,
            "SN_pixel": report["SN_pixel"],
            "PPV_pixel": report["PPV_pixel"],
            "F_pixel": report["F_pixel"],
            "IoU": report["IoU"],
            "AUPR": report["AUPR"],
            "F_sigma": report["F_sigma"],
            "report": str(report_path),
            "checkpoint": report["checkpoint"],
        }
    (out_dir / "comparison.json").write_text(json.dumps(table, indent=2, sort_keys=True),
                                             encoding="utf-8")
    (out_dir / "comparison.txt").write_text(render_comparison(table), encoding="utf-8")
    return table


def render_comparison(table: dict[str, dict]) -> str:
    sigma_keys = sorted({k for row in table.values() for k in row["F_sigma"]}, key=float)
    header = ["cell", "SN_pixel", "PPV_pixel", "F_pixel", "IoU", "AUPR"]
    header += [f"F_{k}" for k in sigma_keys]
    rows = [header]
    for name in sorted(table):
        row = table[name]
        rows.append([name] + [f"{row[k]:.4f}" for k in ("SN_pixel", "PPV_pixel", "F_pixel", "IoU", "AUPR")]
                    + [f"{row['F_sigma'][k]:.4f}" for k in sigma_keys])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
