"""Merge finetuned checkpoints that share one pretrained base.

Besides single-checkpoint baselines (averaging, Fisher, RegMean, Task
Arithmetic, Ties, DARE), the package implements EMR-Merging: one elected
unified task vector plus a 1-bit mask and a scalar rescaler per task, from
which each task's weights are reconstructed on demand.
"""
from .analysis import (
    MergeReport,
    cosine_similarity,
    distance_suite,
    emit_report,
    l2_distance,
    mask_density,
    sign_conflict_ratio,
)
from .baselines import (
    MergeConfig,
    dare_preprocess,
    fisher_merge,
    regmean_merge,
    task_arithmetic_merge,
    ties_merge,
    weight_average,
)
from .checkpoint_io import Checkpoint, DType, cast, read_checkpoint, validate_aligned, write_checkpoint
from .emr import (
    EmrBundle,
    TaskModulator,
    apply_bundle,
    derive_mask,
    derive_rescaler,
    elect_unified,
    emr_merge,
    modulate,
    reconstruct_task,
)
from .modulator_store import load_bundle, pack_mask, save_bundle, unpack_mask
from .task_vector import (
    TaskVector,
    TaskVectorSet,
    apply_task_vector,
    compute_task_vector,
    fingerprint,
    flatten_concat,
)

__version__ = "0.1.0"

__all__ = [
    "MergeReport",
    "cosine_similarity",
    "distance_suite",
    "emit_report",
    "l2_distance",
    "mask_density",
    "sign_conflict_ratio",
    "MergeConfig",
    "dare_preprocess",
    "fisher_merge",
    "regmean_merge",
    "task_arithmetic_merge",
    "ties_merge",
    "weight_average",
    "Checkpoint",
    "DType",
    "cast",
    "read_checkpoint",
    "validate_aligned",
    "write_checkpoint",
    "EmrBundle",
    "TaskModulator",
    "apply_bundle",
    "derive_mask",
    "derive_rescaler",
    "elect_unified",
    "emr_merge",
    "modulate",
    "reconstruct_task",
    "load_bundle",
    "pack_mask",
    "save_bundle",
    "unpack_mask",
    "TaskVector",
    "TaskVectorSet",
    "apply_task_vector",
    "compute_task_vector",
    "fingerprint",
    "flatten_concat",
]
