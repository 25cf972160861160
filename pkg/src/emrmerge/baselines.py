"""Single-model merging baselines: averaging, Fisher, RegMean, Task Arithmetic, Ties, DARE."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from . import _parallel
from .checkpoint_io import Checkpoint, DType, cast, dtype_of, validate_aligned
from .errors import AlignmentError, ConfigError
from .task_vector import (
    DEFAULT_COMPUTE_DTYPE,
    TaskVector,
    TaskVectorSet,
    apply_task_vector,
    flatten_concat,
    ordered_sum,
)

__all__ = [
    "MergeConfig",
    "DareConfig",
    "DARE_RNG_VERSION",
    "weight_average",
    "task_arithmetic_vector",
    "task_arithmetic_merge",
    "ties_trim",
    "ties_vector",
    "ties_merge",
    "dare_preprocess",
    "fisher_merge",
    "regmean_merge",
]

METHODS = ("average", "task_arithmetic", "ties", "fisher", "regmean")
FISHER_EPS = 1e-12

# Per-task stream: numpy Philox4x64-10 seeded by SeedSequence([seed, *label words]),
# where label words are the four little-endian u64s of sha256(label). One uniform
# double per element in canonical flatten order; an element is dropped iff u < p.
DARE_RNG_VERSION = "philox4x64-sha256label/1"


@dataclass(frozen=True)
class DareConfig:
    drop_prob: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"DARE drop probability must be in [0, 1), got {self.drop_prob}")


@dataclass(frozen=True)
class MergeConfig:
    method: str
    lam: float | None = None
    ties_keep_fraction: float = 0.2
    ties_trim: Literal["global", "per_tensor"] = "global"
    dare: DareConfig | None = None
    regmean_offdiag: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ConfigError(f"ties keep fraction must be in (0, 1], got {self.ties_keep_fraction}")
        if self.ties_trim not in ("global", "per_tensor"):
            raise ConfigError(f"ties trim must be 'global' or 'per_tensor', got {self.ties_trim!r}")
        if not 0.0 < self.regmean_offdiag <= 1.0:
            raise ConfigError(f"regmean off-diagonal multiplier must be in (0, 1], got {self.regmean_offdiag}")

    @property
    def coefficient(self) -> float:
        if self.lam is not None:
            return self.lam
        return 0.3 if self.method == "task_arithmetic" else 1.0


def _like(models: Sequence[Checkpoint], like: Checkpoint | None) -> Checkpoint:
    return like if like is not None else models[0]


def _per_tensor(names: Sequence[str], fn) -> dict[str, np.ndarray]:
    return dict(zip(names, _parallel.pmap(fn, names)))


def weight_average(
    models: Sequence[Checkpoint],
    *,
    like: Checkpoint | None = None,
    compute_dtype: DType | str = DEFAULT_COMPUTE_DTYPE,
) -> Checkpoint:
    """Element-wise mean of the model weights, written in ``like``'s dtypes (default: first model)."""
    ref = _like(models, like)
    validate_aligned(ref, models)
    n = len(models)

    def mean(name: str) -> np.ndarray:
        total = ordered_sum([cast(m[name], compute_dtype) for m in models])
        return cast(total / total.dtype.type(n), dtype_of(ref[name]))

    return Checkpoint(_per_tensor(ref.names, mean))


def task_arithmetic_vector(tasks: TaskVectorSet, lam: float = 1.0) -> TaskVector:
    """``lam * sum_i tau_i`` as a task vector."""
    names = tasks.names

    def combine(name: str) -> np.ndarray:
        total = ordered_sum([tv[name] for tv in tasks])
        return total * total.dtype.type(lam) if lam != 1.0 else total

    return TaskVector(_per_tensor(names, combine), "task_arithmetic")


def task_arithmetic_merge(tasks: TaskVectorSet, base: Checkpoint, lam: float = 0.3) -> Checkpoint:
    return apply_task_vector(base, task_arithmetic_vector(tasks), lam)


def _keep_count(keep_fraction: float, n: int) -> int:
    # the rounding guards against 0.2 * 50 == 10.000000000000002
    return min(n, math.ceil(round(keep_fraction * n, 9)))


def _trim_threshold(magnitudes: np.ndarray, keep_fraction: float) -> float:
    n = magnitudes.size
    if n == 0:
        return math.inf
    k = _keep_count(keep_fraction, n)
    return float(np.partition(magnitudes, n - k)[n - k])


def ties_trim(
    tau: TaskVector, keep_fraction: float, granularity: Literal["global", "per_tensor"] = "global"
) -> TaskVector:
    """Zero all but the top ``keep_fraction`` of entries by magnitude.

    Entries tied with the k-th largest magnitude are all kept.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    if granularity == "global":
        threshold = _trim_threshold(np.abs(flatten_concat(tau)), keep_fraction)
        thresholds = {name: threshold for name in tau.names}
    elif granularity == "per_tensor":
        thresholds = {
            name: _trim_threshold(np.abs(t).ravel(), keep_fraction) for name, t in tau.items()
        }
    else:
        raise ConfigError(f"unknown trim granularity {granularity!r}")
    trimmed = {
        name: np.where(np.abs(t) >= thresholds[name], t, t.dtype.type(0)) for name, t in tau.items()
    }
    return TaskVector(trimmed, tau.label)


def _disjoint_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    sign = np.sign(ordered_sum(arrays))
    agree = [np.sign(a) * sign > 0 for a in arrays]
    total = ordered_sum([np.where(m, a, 0) for m, a in zip(agree, arrays)])
    count = np.sum(agree, axis=0)
    out = np.zeros_like(total)
    nz = count > 0
    out[nz] = total[nz] / count[nz]
    return out


def ties_vector(
    tasks: TaskVectorSet,
    keep_fraction: float = 0.2,
    granularity: Literal["global", "per_tensor"] = "global",
) -> TaskVector:
    """Trim, elect sign, disjoint mean. Returns the merged task vector (unscaled)."""
    trimmed = [ties_trim(tv, keep_fraction, granularity) for tv in tasks]
    names = tasks.names
    merged = _per_tensor(names, lambda n: _disjoint_mean([tv[n] for tv in trimmed]))
    return TaskVector(merged, "ties")


def ties_merge(
    tasks: TaskVectorSet,
    base: Checkpoint,
    lam: float = 1.0,
    keep_fraction: float = 0.2,
    granularity: Literal["global", "per_tensor"] = "global",
) -> Checkpoint:
    return apply_task_vector(base, ties_vector(tasks, keep_fraction, granularity), lam)


def _dare_generator(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *words])))


def dare_preprocess(tau: TaskVector, p: float, seed: int = 0) -> TaskVector:
    """Drop each entry with probability ``p`` and rescale survivors by 1/(1-p).

    The random stream is keyed by ``(seed, tau.label)`` so results do not depend
    on where the task sits in a list.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"DARE drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        return tau
    rng = _dare_generator(seed, tau.label)
    u = rng.random(tau.d)
    out = {}
    offset = 0
    for name, t in tau.items():
        keep = (u[offset : offset + t.size] >= p).reshape(t.shape)
        offset += t.size
        scaled = t.astype(np.float64) / (1.0 - p)
        out[name] = np.where(keep, scaled, 0.0).astype(t.dtype, copy=False)
    return TaskVector(out, tau.label)


def fisher_merge(
    models: Sequence[Checkpoint],
    fishers: Sequence[Checkpoint],
    *,
    like: Checkpoint | None = None,
    compute_dtype: DType | str = DEFAULT_COMPUTE_DTYPE,
) -> Checkpoint:
    """``sum F_i W_i / (sum F_i + 1e-12)``; plain mean where every F_i is zero."""
    ref = _like(models, like)
    validate_aligned(ref, models)
    if len(fishers) != len(models):
        raise AlignmentError(f"{len(fishers)} Fisher checkpoints for {len(models)} models")
    validate_aligned(ref, fishers)
    for idx, f in enumerate(fishers):
        for name, arr in f.items():
            if arr.size and np.any(cast(arr, DType.F64) < 0):
                raise ConfigError(f"Fisher {idx}: negative value in tensor {name!r}")
    n = len(models)

    def merge(name: str) -> np.ndarray:
        w = [cast(m[name], compute_dtype) for m in models]
        f = [cast(fi[name], compute_dtype) for fi in fishers]
        num = ordered_sum([fi * wi for fi, wi in zip(f, w)])
        den = ordered_sum(f)
        out = num / (den + den.dtype.type(FISHER_EPS))
        zero = den == 0
        if np.any(zero):
            out = np.where(zero, ordered_sum(w) / w[0].dtype.type(n), out)
        return cast(out, dtype_of(ref[name]))

    return Checkpoint(_per_tensor(ref.names, merge))


def _solve_spd(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    dim = lhs.shape[0]
    if dim == 0:
        return rhs.copy()
    try:
        if np.linalg.cond(lhs) < 1e12:
            return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        pass
    delta = 1e-8 * float(np.trace(lhs)) / dim
    if delta <= 0:
        delta = 1e-8
    return np.linalg.solve(lhs + delta * np.eye(dim), rhs)


def regmean_merge(
    models: Sequence[Checkpoint],
    grams: Sequence[Mapping[str, np.ndarray]],
    a: float = 1.0,
    *,
    like: Checkpoint | None = None,
) -> Checkpoint:
    """Closed-form RegMean for linear layers, plain average for everything else.

    Weights use the ``[out_features, in_features]`` layout, so a layer's Gram
    matrix is ``in_features`` square. Each Gram's off-diagonal is scaled by ``a``
    before solving ``W^T = (sum G_i)^-1 sum G_i W_i^T``.
    """
    ref = _like(models, like)
    validate_aligned(ref, models)
    if len(grams) != len(models):
        raise AlignmentError(f"{len(grams)} Gram sets for {len(models)} models")
    if not 0.0 < a <= 1.0:
        raise ConfigError(f"off-diagonal multiplier must be in (0, 1], got {a}")
    layer_names = set(grams[0]) if grams else set()
    for idx, g in enumerate(grams):
        if set(g) != layer_names:
            raise AlignmentError(f"Gram set {idx} covers different layers than Gram set 0")
    for name in sorted(layer_names):
        if name not in ref.tensors:
            raise AlignmentError(f"Gram matrix for unknown layer {name!r}")
        w = ref[name]
        if w.ndim != 2:
            raise AlignmentError(f"layer {name!r} is not 2-D (shape {list(w.shape)})")
        for idx, g in enumerate(grams):
            gm = g[name]
            if gm.ndim != 2 or gm.shape[0] != gm.shape[1]:
                raise AlignmentError(f"Gram {idx} for {name!r} is not square: {list(gm.shape)}")
            if gm.shape[0] != w.shape[1]:
                raise AlignmentError(
                    f"Gram {idx} for {name!r} is {gm.shape[0]}x{gm.shape[0]} but the layer "
                    f"has {w.shape[1]} input features"
                )
    n = len(models)

    def merge(name: str) -> np.ndarray:
        ws = [cast(m[name], DType.F64) for m in models]
        if name not in layer_names:
            return cast(ordered_sum(ws) / n, dtype_of(ref[name]))
        scaled = []
        for g in grams:
            gm = cast(np.asarray(g[name]), DType.F64)
            if a != 1.0:
                diag = np.diag(gm).copy()
                gm = gm * a
                np.fill_diagonal(gm, diag)
            scaled.append(gm)
        lhs = ordered_sum(scaled)
        rhs = ordered_sum([g @ w.T for g, w in zip(scaled, ws)])
        return cast(np.ascontiguousarray(_solve_spd(lhs, rhs).T), dtype_of(ref[name]))

    return Checkpoint(_per_tensor(ref.names, merge))
