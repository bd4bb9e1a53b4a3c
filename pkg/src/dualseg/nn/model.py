"""Staged backbone description and the two-branch segmentation network.

A backbone is a chain of conv stages followed by a per-pixel head.  The
dual-branch network keeps one storage for the first `share_depth` stages and
duplicates everything after them (late stages and head) per branch, so a
gradient step through either branch moves the shared block of both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import ValidationError
from .layers import SegmentationHead, StageBlock


@dataclass
class StageSpec:
    channels: int
    stride: int = 1
    dilation: int = 1


@dataclass
class BackboneSpec:
    """Stage layout of one segmentation branch."""

    stages: list[StageSpec] = field(default_factory=list)
    in_channels: int = 3
    ksize: int = 3
    head_init_std: float = 0.01

    @property
    def n_stages(self) -> int:
        return len(self.stages)


def tinyseg_spec() -> BackboneSpec:
    """Desk-scale 5-stage reference backbone.

    Downsampling by stride 2 in stages 2-3 and dilation 2 in stages 4-5, so
    a 4-deep shared prefix is exercised while a 64x64 forward pass stays in
    the millisecond range on CPU.
    """
    return BackboneSpec(stages=[
        StageSpec(8),
        StageSpec(16, stride=2),
        StageSpec(32, stride=2),
        StageSpec(32, dilation=2),
        StageSpec(32, dilation=2),
    ])


def _build_blocks(spec: BackboneSpec, rng: np.random.Generator,
                  first: int, last: int) -> list[StageBlock]:
    blocks = []
    cin = spec.in_channels if first == 0 else spec.stages[first - 1].channels
    for i in range(first, last):
        st = spec.stages[i]
        blocks.append(StageBlock(cin, st.channels, spec.ksize, rng,
                                 stride=st.stride, dilation=st.dilation))
        cin = st.channels
    return blocks


def _to_chw(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"network input must be (H, W, 3), got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class SegmentationNet:
    """A single branch: stage blocks plus head, possibly borrowing blocks."""

    def __init__(self, blocks: list[StageBlock], head: SegmentationHead):
        self.blocks = blocks
        self.head = head

    def forward(self, image: np.ndarray, train: bool):
        x = _to_chw(image)
        out_hw = (x.shape[1], x.shape[2])
        caches = []
        h = x
        for block in self.blocks:
            h, cache = block.forward(h, train)
            caches.append(cache)
        prob, head_cache = self.head.forward(h, out_hw, train)
        return prob, (caches, head_cache)

    def backward(self, grad_prob: np.ndarray, tape) -> None:
        caches, head_cache = tape
        g = self.head.backward(grad_prob, head_cache)
        for block, cache in zip(reversed(self.blocks), reversed(caches)):
            g = block.backward(g, cache)

    def predict(self, image: np.ndarray) -> np.ndarray:
        prob, _ = self.forward(image, train=False)
        return prob

    def named_params(self, prefix: str = "single") -> dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            out.update({f"{prefix}.stage{i}.{k}": v for k, v in block.params().items()})
        out.update({f"{prefix}.head.{k}": v for k, v in self.head.params().items()})
        return out

    def named_grads(self, prefix: str = "single") -> dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            out.update({f"{prefix}.stage{i}.{k}": v for k, v in block.grads().items()})
        out.update({f"{prefix}.head.{k}": v for k, v in self.head.grads().items()})
        return out

    def named_buffers(self, prefix: str = "single") -> dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            out.update({f"{prefix}.stage{i}.{k}": v for k, v in block.buffers().items()})
        return out


def build_single_branch(spec: BackboneSpec, seed: int = 0) -> SegmentationNet:
    """Build one branch; stages and head drawn from seed-derived streams."""
    if spec.n_stages < 2:
        raise ValidationError("backbone needs at least 2 stages")
    rng_stages = np.random.default_rng([seed, 0])
    rng_head = np.random.default_rng([seed, 2])
    blocks = _build_blocks(spec, rng_stages, 0, spec.n_stages)
    head = SegmentationHead(spec.stages[-1].channels, rng_head, spec.head_init_std)
    return SegmentationNet(blocks, head)


class DualBranchNet:
    """Two branches sharing the parameters of the first `share_depth` stages.

    The shared blocks are single objects referenced from both branch views;
    the branch-specific blocks start from identical draws and diverge only
    through the asymmetric losses.  During a training iteration the large
    branch runs first, so shared normalization statistics absorb both inputs
    in fetch order.
    """

    def __init__(self, spec: BackboneSpec, share_depth: int, seed: int = 0):
        if spec.n_stages < 2:
            raise ValidationError("backbone needs at least 2 stages")
        if not (1 <= share_depth < spec.n_stages):
            raise ValidationError(
                f"share depth must satisfy 1 <= k < {spec.n_stages}, got {share_depth}")
        self.spec = spec
        self.share_depth = share_depth
        self.shared_blocks = _build_blocks(spec, np.random.default_rng([seed, 0]), 0, share_depth)
        # both branch tails consume fresh streams with the same derivation,
        # so they start bit-identical and diverge only through the losses
        self.large_blocks = _build_blocks(spec, np.random.default_rng([seed, 1]),
                                          share_depth, spec.n_stages)
        self.small_blocks = _build_blocks(spec, np.random.default_rng([seed, 1]),
                                          share_depth, spec.n_stages)
        head_c = spec.stages[-1].channels
        self.large_head = SegmentationHead(head_c, np.random.default_rng([seed, 2]), spec.head_init_std)
        self.small_head = SegmentationHead(head_c, np.random.default_rng([seed, 2]), spec.head_init_std)
        self._tape_large = None
        self._tape_small = None

    def branch(self, which: str) -> SegmentationNet:
        if which == "large":
            return SegmentationNet(self.shared_blocks + self.large_blocks, self.large_head)
        if which == "small":
            return SegmentationNet(self.shared_blocks + self.small_blocks, self.small_head)
        raise ValidationError(f"branch must be 'large' or 'small', got {which!r}")

    def forward_train(self, x_large: np.ndarray, x_small: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        prob_large, self._tape_large = self.branch("large").forward(x_large, train=True)
        prob_small, self._tape_small = self.branch("small").forward(x_small, train=True)
        return prob_large, prob_small

    def backward_train(self, grad_large: np.ndarray, grad_small: np.ndarray) -> None:
        if self._tape_large is None or self._tape_small is None:
            raise RuntimeError("backward_train called before forward_train")
        self.branch("large").backward(grad_large, self._tape_large)
        self.branch("small").backward(grad_small, self._tape_small)
        self._tape_large = None
        self._tape_small = None

    def forward_infer(self, image: np.ndarray) -> np.ndarray:
        prob_large = self.branch("large").predict(image)
        prob_small = self.branch("small").predict(image)
        return (prob_large + prob_small) / 2.0

    def _sections(self):
        yield "shared", self.shared_blocks, None
        yield "large", self.large_blocks, self.large_head
        yield "small", self.small_blocks, self.small_head

    def _collect(self, getter) -> dict[str, np.ndarray]:
        out = {}
        for prefix, blocks, head in self._sections():
            offset = 0 if prefix == "shared" else self.share_depth
            for i, block in enumerate(blocks, start=offset + 1):
                out.update({f"{prefix}.stage{i}.{k}": v for k, v in getter(block).items()})
            if head is not None:
                out.update({f"{prefix}.head.{k}": v for k, v in getter(head).items()})
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        return self._collect(lambda m: m.params())

    def named_grads(self) -> dict[str, np.ndarray]:
        return self._collect(lambda m: m.grads())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return self._collect(lambda m: m.buffers())


def build_dual_branch(spec: BackboneSpec, share_depth: int, seed: int = 0) -> DualBranchNet:
    return DualBranchNet(spec, share_depth, seed)


@dataclass
class ParameterReport:
    shared: int
    branch_large: int
    branch_small: int

    @property
    def dual_total(self) -> int:
        return self.shared + self.branch_large + self.branch_small

    @property
    def single_total(self) -> int:
        return self.shared + self.branch_large

    @property
    def ratio(self) -> float:
        return self.dual_total / self.single_total


def parameter_report(net: DualBranchNet) -> ParameterReport:
    """Trainable parameter counts per section and the dual/single ratio."""
    counts = {"shared": 0, "large": 0, "small": 0}
    for name, arr in net.named_params().items():
        counts[name.split(".", 1)[0]] += arr.size
    return ParameterReport(counts["shared"], counts["large"], counts["small"])
