"""Weight-space diagnostics for merged models and EMR bundles."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .checkpoint_io import Checkpoint, DType, cast
from .emr import EmrBundle, reconstruct_task
from .errors import AlignmentError, EmrMergeError
from .modulator_store import BundleLayout
from .task_vector import TaskVector, TaskVectorSet, check_schema, flatten_concat

__all__ = [
    "REPORT_SCHEMA",
    "sign_conflict_ratio",
    "l2_distance",
    "cosine_similarity",
    "Distances",
    "distance_suite",
    "mask_density",
    "TaskReport",
    "MergeReport",
    "storage_summary",
    "analyze_merged",
    "analyze_bundle",
    "emit_report",
    "load_report",
]

REPORT_SCHEMA = "emrmerge.report/1"
Space = Literal["task_vector", "weights"]


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def sign_conflict_ratio(a, b) -> float:
    """Fraction of positions where ``a * b < 0``; zeros never conflict."""
    a, b = _pair(a, b)
    if a.size == 0:
        return 0.0
    return int(np.count_nonzero(np.sign(a) * np.sign(b) < 0)) / a.size


def l2_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b))


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity with a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Distances:
    dis: float
    dis_mask: float
    dis_mask_rescale: float


def _sq(x: np.ndarray) -> float:
    return float(np.sum(x * x))


def distance_suite(tasks: TaskVectorSet, bundle: EmrBundle) -> Distances:
    """Mean squared distance to each task vector: unified, masked, masked+rescaled."""
    if tasks.labels != bundle.labels:
        raise EmrMergeError(f"task labels {tasks.labels} do not match bundle {bundle.labels}")
    check_schema(tasks[0], bundle.unified)
    plain, masked, rescaled = [], [], []
    for tv in tasks:
        mod = bundle.modulator(tv.label)
        for name in tv.names:
            t = tv[name].astype(np.float64, copy=False)
            u = bundle.unified[name].astype(np.float64, copy=False)
            mu = np.where(mod.mask[name], u, 0.0)
            plain.append(_sq(t - u))
            masked.append(_sq(t - mu))
            rescaled.append(_sq(t - mod.scale_for(name) * mu))
    n = len(tasks)
    return Distances(math.fsum(plain) / n, math.fsum(masked) / n, math.fsum(rescaled) / n)


def mask_density(bundle: EmrBundle, task: str) -> float:
    return bundle.modulator(task).density


@dataclass
class TaskReport:
    task: str
    sign_conflict_ratio: float
    l2_distance: float
    cosine_similarity: float
    mask_density: float | None = None
    rescaler: float | None = None


_METRICS = ("sign_conflict_ratio", "l2_distance", "cosine_similarity", "mask_density", "rescaler")


@dataclass
class MergeReport:
    method: str
    tasks: list[TaskReport] = field(default_factory=list)
    distances: Distances | None = None
    storage: dict | None = None
    space: str = "task_vector"

    @property
    def aggregate(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for key in _METRICS:
            vals = [getattr(t, key) for t in self.tasks if getattr(t, key) is not None]
            out[key] = math.fsum(vals) / len(vals) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "space": self.space,
            "tasks": [asdict(t) for t in self.tasks],
            "aggregate": self.aggregate,
            "distances": asdict(self.distances) if self.distances else None,
            "storage": self.storage,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MergeReport":
        if data.get("schema") != REPORT_SCHEMA:
            raise EmrMergeError(f"unsupported report schema {data.get('schema')!r}")
        dist = data.get("distances")
        return cls(
            method=data["method"],
            tasks=[TaskReport(**t) for t in data.get("tasks", [])],
            distances=Distances(**dist) if dist else None,
            storage=data.get("storage"),
            space=data.get("space", "task_vector"),
        )


def storage_summary(bundle: EmrBundle, layout: BundleLayout | None = None) -> dict:
    """Byte accounting of modulators versus N separate F32 task vectors."""
    n, d = len(bundle.modulators), bundle.d
    mask_bytes = sum(
        sum(math.ceil(m.size / 8) for m in mod.mask.values()) for mod in bundle.modulators
    )
    rescaler_bytes = sum(
        8 * (len(mod.rescaler) if mod.per_tensor else 1) for mod in bundle.modulators
    )
    unified_bytes = sum(int(t.nbytes) for t in bundle.unified.tensors.values())
    separate = n * 4 * d
    out = {
        "tasks": n,
        "d": d,
        "unified_bytes": unified_bytes,
        "mask_bytes": mask_bytes,
        "rescaler_bytes": rescaler_bytes,
        "separate_f32_task_vector_bytes": separate,
        "mask_ratio": separate / mask_bytes if mask_bytes else None,
        "modulator_ratio": separate / (mask_bytes + rescaler_bytes),
    }
    if layout is not None:
        out["file_bytes"] = layout.total
        out["index_bytes"] = layout.index_bytes
    return out


def _flat_pair(
    merged: TaskVector, tau: TaskVector, space: Space, base_flat: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    m = flatten_concat(merged).astype(np.float64, copy=False)
    t = flatten_concat(tau).astype(np.float64, copy=False)
    if space == "weights":
        if base_flat is None:
            raise ValueError("weight-space comparison needs the base checkpoint")
        return base_flat + m, base_flat + t
    return m, t


def _base_flat(base: Checkpoint | None) -> np.ndarray | None:
    if base is None:
        return None
    parts = [cast(arr, DType.F64).ravel() for _, arr in base.items()]
    return np.concatenate(parts) if parts else np.zeros(0)


def _task_row(merged: TaskVector, tau: TaskVector, space: Space, base_flat) -> TaskReport:
    a, b = _flat_pair(merged, tau, space, base_flat)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cos = cosine_similarity(a, b)
    return TaskReport(tau.label, sign_conflict_ratio(a, b), l2_distance(a, b), cos)


def analyze_merged(
    tasks: TaskVectorSet,
    merged: TaskVector,
    method: str = "merged",
    *,
    space: Space = "task_vector",
    base: Checkpoint | None = None,
) -> MergeReport:
    """Compare one merged task vector against every task vector."""
    if len(tasks):
        check_schema(tasks[0], merged, "merged")
    bf = _base_flat(base) if space == "weights" else None
    rows = [_task_row(merged, tv, space, bf) for tv in tasks]
    return MergeReport(method, rows, space=space)


def analyze_bundle(
    tasks: TaskVectorSet,
    bundle: EmrBundle,
    layout: BundleLayout | None = None,
    *,
    space: Space = "task_vector",
    base: Checkpoint | None = None,
) -> MergeReport:
    """Compare each task's reconstruction with its task vector, plus mask/rescaler stats."""
    if tasks.labels != bundle.labels:
        raise AlignmentError(f"task labels {tasks.labels} do not match bundle {bundle.labels}")
    bf = _base_flat(base) if space == "weights" else None
    rows = []
    for tv in tasks:
        row = _task_row(reconstruct_task(bundle, tv.label), tv, space, bf)
        mod = bundle.modulator(tv.label)
        row.mask_density = mod.density
        row.rescaler = None if mod.per_tensor else mod.rescaler
        rows.append(row)
    return MergeReport(
        "emr",
        rows,
        distances=distance_suite(tasks, bundle),
        storage=storage_summary(bundle, layout),
        space=space,
    )


def report_json(report: MergeReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: MergeReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", *_METRICS])

    def fmt(v):
        return "" if v is None else repr(float(v))

    for t in report.tasks:
        writer.writerow([t.task, *(fmt(getattr(t, k)) for k in _METRICS)])
    agg = report.aggregate
    writer.writerow(["__aggregate__", *(fmt(agg[k]) for k in _METRICS)])
    return buf.getvalue()


def emit_report(report: MergeReport, path: str | Path, format: Literal["json", "csv"] = "json") -> None:
    if format == "json":
        text = report_json(report)
    elif format == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    Path(path).write_text(text, encoding="utf-8")


def load_report(path: str | Path) -> MergeReport:
    return MergeReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
