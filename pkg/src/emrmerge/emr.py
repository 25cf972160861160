"""EMR-Merging: elect a unified task vector, then per-task masks and rescalers.

Merging never looks at data. Each task keeps a 1-bit mask selecting the
elements of the unified vector whose sign agrees with its own task vector,
plus one scalar that restores the task's total absolute magnitude::

    unified[p] = s * max{|tau_t[p]| : sign(tau_t[p]) == s},  s = sign(sum_t tau_t[p])
    mask_t     = tau_t * unified > 0
    scale_t    = sum|tau_t| / sum|mask_t * unified|
    tau_hat_t  = scale_t * mask_t * unified
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from . import _parallel
from .checkpoint_io import Checkpoint, dtype_of
from .errors import AlignmentError, EmrMergeError, FingerprintMismatch, UnknownTaskError
from .task_vector import (
    TaskVector,
    TaskVectorSet,
    apply_task_vector,
    check_schema,
    fingerprint,
    ordered_sum,
)

__all__ = [
    "TaskModulator",
    "EmrBundle",
    "elect_unified",
    "derive_mask",
    "derive_rescaler",
    "emr_merge",
    "reconstruct_task",
    "apply_bundle",
    "modulate",
]

RescalerMethod = Literal["mean_abs", "least_squares"]

UNIFIED_LABEL = "unified"


@dataclass(frozen=True, eq=False)
class TaskModulator:
    label: str
    mask: Mapping[str, np.ndarray]
    # one scalar for the whole model, or one per tensor when built with per_tensor=True
    rescaler: float | Mapping[str, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask", {k: self.mask[k] for k in sorted(self.mask)})
        if isinstance(self.rescaler, Mapping):
            object.__setattr__(
                self, "rescaler", {k: float(self.rescaler[k]) for k in sorted(self.rescaler)}
            )
        else:
            object.__setattr__(self, "rescaler", float(self.rescaler))

    @property
    def per_tensor(self) -> bool:
        return isinstance(self.rescaler, Mapping)

    def scale_for(self, name: str) -> float:
        return self.rescaler[name] if isinstance(self.rescaler, Mapping) else self.rescaler

    @property
    def ones(self) -> int:
        return sum(int(np.count_nonzero(m)) for m in self.mask.values())

    @property
    def d(self) -> int:
        return sum(int(m.size) for m in self.mask.values())

    @property
    def density(self) -> float:
        d = self.d
        return self.ones / d if d else 0.0


@dataclass(frozen=True, eq=False)
class EmrBundle:
    """Unified task vector plus per-task modulators, tied to one base checkpoint."""

    base_fingerprint: str
    unified: TaskVector
    modulators: tuple[TaskModulator, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "modulators", tuple(self.modulators))
        if not self.modulators:
            raise EmrMergeError("bundle needs at least one task modulator")
        schema = self.unified.schema()
        for mod in self.modulators:
            if {k: tuple(v.shape) for k, v in mod.mask.items()} != schema:
                raise AlignmentError(f"mask schema of task {mod.label!r} differs from unified vector")
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise EmrMergeError(f"duplicate task labels: {labels}")

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.modulators]

    @property
    def d(self) -> int:
        return self.unified.d

    def modulator(self, label: str) -> TaskModulator:
        for mod in self.modulators:
            if mod.label == label:
                return mod
        raise UnknownTaskError(label, self.labels)


def _vectors(tasks: TaskVectorSet | Sequence[TaskVector]) -> list[TaskVector]:
    vectors = list(tasks)
    if not vectors:
        raise EmrMergeError("cannot merge an empty set of task vectors")
    for tv in vectors[1:]:
        check_schema(vectors[0], tv)
    return vectors


def _elect_tensor(arrays: Sequence[np.ndarray]) -> np.ndarray:
    wide = [a.astype(np.float64, copy=False) for a in arrays]
    sign = np.sign(ordered_sum(wide))
    magnitude = np.zeros(sign.shape, dtype=np.float64)
    for a in wide:
        agree = np.sign(a) * sign > 0
        np.maximum(magnitude, np.where(agree, np.abs(a), 0.0), out=magnitude)
    unified = np.where(magnitude == 0, 0.0, sign * magnitude)
    return unified.astype(arrays[0].dtype, copy=False)


def elect_unified(tasks: TaskVectorSet | Sequence[TaskVector]) -> TaskVector:
    """Sign of the summed task vectors, magnitude of the largest agreeing entry."""
    vectors = _vectors(tasks)
    names = vectors[0].names
    elected = _parallel.pmap(lambda n: _elect_tensor([tv[n] for tv in vectors]), names)
    return TaskVector(dict(zip(names, elected)), UNIFIED_LABEL)


def _mask_tensor(tau: np.ndarray, unified: np.ndarray) -> np.ndarray:
    # compare signs rather than multiplying: the product of two tiny F32 values underflows to 0
    return np.sign(tau) * np.sign(unified) > 0


def derive_mask(tau: TaskVector, unified: TaskVector) -> dict[str, np.ndarray]:
    check_schema(tau, unified)
    return {name: _mask_tensor(tau[name], unified[name]) for name in tau.names}


def _rescaler_sums(
    tau: np.ndarray, unified: np.ndarray, mask: np.ndarray, method: RescalerMethod
) -> tuple[float, float]:
    t = np.abs(tau.astype(np.float64, copy=False))
    u = np.abs(np.where(mask, unified.astype(np.float64, copy=False), 0.0))
    if method == "mean_abs":
        return float(np.sum(t)), float(np.sum(u))
    if method == "least_squares":
        return float(np.sum(t * u)), float(np.sum(u * u))
    raise ValueError(f"unknown rescaler method {method!r}")


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0.0 else 1.0


def derive_rescaler(
    tau: TaskVector,
    unified: TaskVector,
    mask: Mapping[str, np.ndarray],
    *,
    per_tensor: bool = False,
    method: RescalerMethod = "mean_abs",
) -> float | dict[str, float]:
    """Scale that equalises sum|tau| and sum|mask * unified| over the whole model.

    Falls back to 1.0 when the masked unified vector is all zero.
    ``method="least_squares"`` returns <|tau|, |m*u|> / ||m*u||^2 instead, the
    minimiser of ||tau - scale * m*u||^2.
    """
    check_schema(tau, unified)
    sums = {name: _rescaler_sums(tau[name], unified[name], mask[name], method) for name in tau.names}
    if per_tensor:
        return {name: _ratio(num, den) for name, (num, den) in sums.items()}
    num = math.fsum(s[0] for s in sums.values())
    den = math.fsum(s[1] for s in sums.values())
    return _ratio(num, den)


def emr_merge(
    tasks: TaskVectorSet | Sequence[TaskVector],
    *,
    per_tensor_rescaler: bool = False,
    rescaler_method: RescalerMethod = "mean_abs",
) -> EmrBundle:
    vectors = _vectors(tasks)
    labels = [tv.label for tv in vectors]
    if len(set(labels)) != len(labels):
        raise EmrMergeError(f"duplicate task labels: {labels}")
    unified = elect_unified(vectors)
    modulators = []
    for tv in vectors:
        mask = derive_mask(tv, unified)
        scale = derive_rescaler(
            tv, unified, mask, per_tensor=per_tensor_rescaler, method=rescaler_method
        )
        modulators.append(TaskModulator(tv.label, mask, scale))
    base_fp = tasks.base_fingerprint if isinstance(tasks, TaskVectorSet) else ""
    meta = {"rescaler_method": rescaler_method, "per_tensor_rescaler": str(per_tensor_rescaler).lower()}
    return EmrBundle(base_fp, unified, tuple(modulators), meta)


def _scaled_masked(unified: TaskVector, mod: TaskModulator, label: str) -> TaskVector:
    def one(name: str) -> np.ndarray:
        u = unified[name]
        out = np.where(mod.mask[name], u.astype(np.float64, copy=False), 0.0)
        scale = mod.scale_for(name)
        if scale != 1.0:
            out *= scale
        return out.astype(u.dtype, copy=False)

    names = unified.names
    return TaskVector(dict(zip(names, _parallel.pmap(one, names))), label)


def reconstruct_task(bundle: EmrBundle, label: str) -> TaskVector:
    """Task-specific vector ``scale * mask * unified``; add it to the base to get the model."""
    return _scaled_masked(bundle.unified, bundle.modulator(label), label)


def apply_bundle(
    base: Checkpoint, bundle: EmrBundle, label: str, *, check_fingerprint: bool = True
) -> Checkpoint:
    if check_fingerprint:
        actual = fingerprint(base)
        if actual != bundle.base_fingerprint:
            raise FingerprintMismatch(bundle.base_fingerprint, actual)
    tau_hat = reconstruct_task(bundle, label)
    out = apply_task_vector(base, tau_hat, 1.0)
    return Checkpoint(out.tensors, {"emr_task": label})


def modulate(
    merged: TaskVector, tau: TaskVector, *, method: RescalerMethod = "mean_abs"
) -> tuple[dict[str, np.ndarray], float, TaskVector]:
    """Mask and rescale an arbitrary merged task vector towards one task."""
    mask = derive_mask(tau, merged)
    scale = derive_rescaler(tau, merged, mask, method=method)
    mod = TaskModulator(tau.label, mask, scale)
    return mask, scale, _scaled_masked(merged, mod, tau.label)


def unified_dtype(bundle: EmrBundle) -> str:
    first = next(iter(bundle.unified.tensors.values()), None)
    return dtype_of(first).value if first is not None else "F64"
