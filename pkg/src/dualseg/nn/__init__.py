from .model import (
    BackboneSpec,
    DualBranchNet,
    ParameterReport,
    SegmentationNet,
    StageSpec,
    build_dual_branch,
    build_single_branch,
    parameter_report,
    tinyseg_spec,
)

__all__ = [
    "BackboneSpec",
    "DualBranchNet",
    "ParameterReport",
    "SegmentationNet",
    "StageSpec",
    "build_dual_branch",
    "build_single_branch",
    "parameter_report",
    "tinyseg_spec",
]
