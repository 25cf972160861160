"""Reading and writing safetensors-layout checkpoint containers.

File layout::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][data region]

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the data region, plus an optional
``"__metadata__"`` string map. Tensors are row-major and little-endian.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import ml_dtypes
import numpy as np

from .errors import AlignmentError, CheckpointFormatError

__all__ = [
    "DType",
    "Checkpoint",
    "AlignmentSummary",
    "read_checkpoint",
    "write_checkpoint",
    "validate_aligned",
    "cast",
    "dtype_of",
]

_HEADER_LEN = struct.Struct("<Q")
_MAX_HEADER = 100 * 1024 * 1024


class DType(str, enum.Enum):
    F16 = "F16"
    BF16 = "BF16"
    F32 = "F32"
    F64 = "F64"

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def itemsize(self) -> int:
        return _NUMPY[self].itemsize


_NUMPY: dict[DType, np.dtype] = {
    DType.F16: np.dtype("<f2"),
    DType.BF16: np.dtype(ml_dtypes.bfloat16),
    DType.F32: np.dtype("<f4"),
    DType.F64: np.dtype("<f8"),
}


def dtype_of(array: np.ndarray) -> DType:
    """Map a numpy array's dtype to its container tag."""
    for tag, npd in _NUMPY.items():
        if array.dtype == npd:
            return tag
    raise TypeError(f"unsupported array dtype {array.dtype}")


def cast(array: np.ndarray, to: DType | str) -> np.ndarray:
    """Round-to-nearest-even conversion; casting to the same dtype returns ``array``."""
    to = DType(to)
    if array.dtype == to.numpy:
        return array
    return array.astype(to.numpy)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Ordered name -> tensor map. Iteration is always lexicographic by name."""

    tensors: Mapping[str, np.ndarray]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ordered = {}
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            if not isinstance(arr, np.ndarray):
                arr = np.asarray(arr)
            dtype_of(arr)
            ordered[name] = arr
        object.__setattr__(self, "tensors", ordered)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_elements(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def dtypes(self) -> dict[str, DType]:
        return {name: dtype_of(t) for name, t in self.tensors.items()}

    def equals(self, other: "Checkpoint", *, check_metadata: bool = False) -> bool:
        """Byte-level equality: same names, dtypes, shapes and raw data."""
        if self.names != other.names:
            return False
        if check_metadata and dict(self.metadata) != dict(other.metadata):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True


def _fail(path: object, msg: str) -> CheckpointFormatError:
    return CheckpointFormatError(f"{path}: {msg}")


def parse_checkpoint_bytes(buf: bytes | memoryview, source: object = "<bytes>") -> Checkpoint:
    if len(buf) < 8:
        raise _fail(source, "file too short for header length")
    (n,) = _HEADER_LEN.unpack_from(buf, 0)
    if n > _MAX_HEADER or 8 + n > len(buf):
        raise _fail(source, f"header length {n} exceeds file size")
    try:
        header = json.loads(bytes(buf[8 : 8 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _fail(source, f"malformed header JSON: {exc}") from None
    if not isinstance(header, dict):
        raise _fail(source, "malformed header JSON: top level is not an object")

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise _fail(source, "__metadata__ must be a string->string map")

    data = memoryview(buf)[8 + n :]
    spans: list[tuple[int, int, str]] = []
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise _fail(source, f"tensor {name!r}: entry is not an object")
        try:
            dtype = DType(entry["dtype"])
        except KeyError:
            raise _fail(source, f"tensor {name!r}: missing dtype") from None
        except ValueError:
            raise _fail(source, f"tensor {name!r}: unknown dtype {entry['dtype']!r}") from None
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise _fail(source, f"tensor {name!r}: invalid shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise _fail(source, f"tensor {name!r}: invalid data_offsets {offsets!r}")
        begin, end = offsets
        if begin < 0 or end < begin:
            raise _fail(source, f"tensor {name!r}: invalid data_offsets {offsets!r}")
        if end > len(data):
            raise _fail(source, f"tensor {name!r}: offset out of bounds ({end} > {len(data)})")
        count = math.prod(shape)
        if (end - begin) != count * dtype.itemsize:
            raise _fail(
                source,
                f"tensor {name!r}: byte length {end - begin} does not match "
                f"shape {shape} x {dtype.itemsize}",
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(data[begin:end], dtype=dtype.numpy, count=count)
        tensors[name] = arr.reshape(shape)

    cursor = 0
    for begin, end, name in sorted(spans):
        if begin < cursor:
            raise _fail(source, f"tensor {name!r}: overlapping data range")
        if begin > cursor:
            raise _fail(source, f"tensor {name!r}: gap in data region before offset {begin}")
        cursor = end
    if cursor != len(data):
        raise _fail(source, f"trailing bytes in data region ({len(data) - cursor})")
    return Checkpoint(tensors, metadata)


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint; tensors are read-only views over the file contents."""
    path = Path(path)
    return parse_checkpoint_bytes(path.read_bytes(), path)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header: dict[str, object] = {}
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    chunks = []
    offset = 0
    for name, arr in ckpt.items():
        raw = np.ascontiguousarray(arr).tobytes()
        header[name] = {
            "dtype": dtype_of(arr).value,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad so the data region starts 8-byte aligned
    blob += b" " * (-len(blob) % 8)
    return _HEADER_LEN.pack(len(blob)) + blob + b"".join(chunks)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


@dataclass(frozen=True)
class AlignmentSummary:
    names: list[str]
    shapes: dict[str, tuple[int, ...]]
    d: int


def validate_aligned(base: Checkpoint, models: Sequence[Checkpoint]) -> AlignmentSummary:
    """Check every model carries exactly the base's tensor names and shapes.

    Dtypes may differ between checkpoints; arithmetic casts them later.
    """
    if not models:
        raise AlignmentError("need at least one model")
    base_names = set(base.names)
    for idx, model in enumerate(models):
        names = set(model.names)
        missing = sorted(base_names - names)
        if missing:
            raise AlignmentError(f"model {idx}: missing tensor {missing[0]!r}")
        extra = sorted(names - base_names)
        if extra:
            raise AlignmentError(f"model {idx}: extra tensor {extra[0]!r}")
        for name in base.names:
            if model[name].shape != base[name].shape:
                raise AlignmentError(
                    f"model {idx}: shape mismatch for tensor {name!r}: "
                    f"{list(model[name].shape)} vs base {list(base[name].shape)}"
                )
    shapes = {name: tuple(base[name].shape) for name in base.names}
    return AlignmentSummary(base.names, shapes, base.num_elements)

