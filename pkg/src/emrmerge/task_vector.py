"""Task vectors: per-tensor differences between a finetuned model and its base."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import _parallel
from .checkpoint_io import Checkpoint, DType, cast, dtype_of, validate_aligned
from .errors import AlignmentError, UnknownTaskError

__all__ = [
    "DEFAULT_COMPUTE_DTYPE",
    "TaskVector",
    "TaskVectorSet",
    "fingerprint",
    "compute_task_vector",
    "apply_task_vector",
    "flatten_concat",
    "ordered_sum",
]

# F64 holds the difference of any two F32/F16/BF16 values exactly, which keeps
# base + (model - base) == model bit-for-bit.
DEFAULT_COMPUTE_DTYPE = DType.F64


@dataclass(frozen=True, eq=False)
class TaskVector:
    tensors: Mapping[str, np.ndarray]
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", {k: self.tensors[k] for k in sorted(self.tensors)})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def d(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def relabel(self, label: str) -> "TaskVector":
        return TaskVector(self.tensors, label)


def check_schema(a: TaskVector, b: TaskVector, what: str = "task vector") -> None:
    if a.names != b.names:
        missing = sorted(set(a.names) ^ set(b.names))
        raise AlignmentError(f"{what} schema mismatch: tensor {missing[0]!r} not in both")
    for name in a.names:
        if a[name].shape != b[name].shape:
            raise AlignmentError(
                f"{what} schema mismatch for tensor {name!r}: "
                f"{list(a[name].shape)} vs {list(b[name].shape)}"
            )


def fingerprint(ckpt: Checkpoint) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) in canonical order."""
    h = hashlib.sha256()
    for name, arr in ckpt.items():
        desc = json.dumps([name, dtype_of(arr).value, list(arr.shape)], separators=(",", ":"))
        h.update(len(desc).to_bytes(8, "little"))
        h.update(desc.encode("utf-8"))
        raw = np.ascontiguousarray(arr).tobytes()
        h.update(len(raw).to_bytes(8, "little"))
        h.update(raw)
    return "sha256:" + h.hexdigest()


def ordered_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise sum that does not depend on the order of ``arrays``.

    Values are sorted along the stacking axis before a left-to-right sum, so
    any permutation of the inputs yields bit-identical output.
    """
    if len(arrays) == 1:
        return arrays[0].copy()
    stack = np.sort(np.stack(arrays), axis=0)
    out = stack[0].copy()
    for row in stack[1:]:
        out += row
    return out


def compute_task_vector(
    model: Checkpoint,
    base: Checkpoint,
    label: str = "",
    compute_dtype: DType | str = DEFAULT_COMPUTE_DTYPE,
) -> TaskVector:
    validate_aligned(base, [model])
    compute_dtype = DType(compute_dtype)

    def diff(name: str) -> np.ndarray:
        return cast(model[name], compute_dtype) - cast(base[name], compute_dtype)

    names = base.names
    return TaskVector(dict(zip(names, _parallel.pmap(diff, names))), label)


def apply_task_vector(base: Checkpoint, tau: TaskVector, coeff: float = 1.0) -> Checkpoint:
    """Return ``base + coeff * tau`` cast back to the base's per-tensor dtypes."""
    if base.names != tau.names:
        missing = sorted(set(base.names) ^ set(tau.names))
        raise AlignmentError(f"task vector does not match base: tensor {missing[0]!r}")

    def add(name: str) -> np.ndarray:
        t = tau[name]
        if t.shape != base[name].shape:
            raise AlignmentError(
                f"shape mismatch for tensor {name!r}: {list(t.shape)} vs base {list(base[name].shape)}"
            )
        b = cast(base[name], dtype_of(t))
        out = b + t if coeff == 1.0 else b + t * t.dtype.type(coeff)
        return cast(out, dtype_of(base[name]))

    names = base.names
    return Checkpoint(dict(zip(names, _parallel.pmap(add, names))), base.metadata)


def flatten_concat(tau: TaskVector | Mapping[str, np.ndarray]) -> np.ndarray:
    tensors = tau.tensors if isinstance(tau, TaskVector) else tau
    parts = [np.ravel(tensors[name]) for name in sorted(tensors)]
    if not parts:
        return np.zeros(0, dtype=DEFAULT_COMPUTE_DTYPE.numpy)
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class TaskVectorSet:
    base_fingerprint: str
    vectors: tuple[TaskVector, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", tuple(self.vectors))
        if not self.vectors:
            return
        first = self.vectors[0]
        for tv in self.vectors[1:]:
            check_schema(first, tv)
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise AlignmentError(f"duplicate task labels: {labels}")

    def __len__(self) -> int:
        return len(self.vectors)

    def __iter__(self) -> Iterator[TaskVector]:
        return iter(self.vectors)

    def __getitem__(self, i: int) -> TaskVector:
        return self.vectors[i]

    @property
    def labels(self) -> list[str]:
        return [tv.label for tv in self.vectors]

    @property
    def names(self) -> list[str]:
        return self.vectors[0].names if self.vectors else []

    @property
    def d(self) -> int:
        return self.vectors[0].d if self.vectors else 0

    def get(self, label: str) -> TaskVector:
        for tv in self.vectors:
            if tv.label == label:
                return tv
        raise UnknownTaskError(label, self.labels)

    @classmethod
    def from_checkpoints(
        cls,
        base: Checkpoint,
        models: Sequence[Checkpoint],
        labels: Sequence[str] | None = None,
        compute_dtype: DType | str = DEFAULT_COMPUTE_DTYPE,
    ) -> "TaskVectorSet":
        validate_aligned(base, models)
        if labels is None:
            labels = [f"task{i}" for i in range(len(models))]
        if len(labels) != len(models):
            raise AlignmentError(f"{len(labels)} labels for {len(models)} models")
        vectors = [
            compute_task_vector(m, base, lab, compute_dtype) for m, lab in zip(models, labels)
        ]
        return cls(fingerprint(base), tuple(vectors))

    @classmethod
    def from_arrays(
        cls,
        arrays: Sequence[np.ndarray | Mapping[str, np.ndarray]],
        labels: Sequence[str] | None = None,
        base_fingerprint: str = "",
    ) -> "TaskVectorSet":
        """Build a set directly from raw task vectors (a bare array becomes tensor ``"w"``)."""
        if labels is None:
            labels = [f"task{i}" for i in range(len(arrays))]
        vectors = []
        for arr, lab in zip(arrays, labels):
            tensors = dict(arr) if isinstance(arr, Mapping) else {"w": arr}
            tensors = {
                k: v if isinstance(v, np.ndarray) else np.asarray(v, dtype=np.float64)
                for k, v in tensors.items()
            }
            vectors.append(TaskVector(tensors, lab))
        return cls(base_fingerprint, tuple(vectors))
