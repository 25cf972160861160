"""Binary persistence for EMR bundles.

Layout (all integers little-endian)::

    [4B magic "EMRB"][u32 version = 1][u64 index length]
    [index JSON][unified data region][mask data region]

The index carries ``base_fingerprint``, ``tasks`` (ordered labels), ``tensors``
(``{name, dtype, shape}`` in canonical order), ``rescalers`` (task -> float, or
task -> {tensor: float} for per-tensor rescalers), ``unified_offsets``
(tensor -> [begin, end]) and ``mask_offsets`` (task -> tensor -> [begin, end]),
plus an optional ``metadata`` string map. Offsets are relative to the start of
their own region. Masks are bit-packed LSB-first with zero padding bits.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .checkpoint_io import DType, dtype_of
from .emr import UNIFIED_LABEL, EmrBundle, TaskModulator
from .errors import BundleFormatError
from .task_vector import TaskVector

__all__ = [
    "MAGIC",
    "VERSION",
    "PackedMask",
    "pack_mask",
    "unpack_mask",
    "save_bundle",
    "load_bundle",
    "bundle_to_bytes",
    "bundle_from_bytes",
    "BundleLayout",
    "read_layout",
]

MAGIC = b"EMRB"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class PackedMask:
    tensor_name: str
    bit_count: int
    data: bytes


def _pack_one(name: str, bits: np.ndarray) -> PackedMask:
    flat = np.ascontiguousarray(bits, dtype=bool).ravel()
    return PackedMask(name, int(flat.size), np.packbits(flat, bitorder="little").tobytes())


def pack_mask(mask: Mapping[str, np.ndarray] | np.ndarray) -> dict[str, PackedMask] | PackedMask:
    """Pack 1-bit arrays; bit j lives at byte j // 8, bit position j % 8."""
    if isinstance(mask, np.ndarray):
        return _pack_one("", mask)
    return {name: _pack_one(name, mask[name]) for name in sorted(mask)}


def unpack_mask(packed: PackedMask, *, strict: bool = True) -> np.ndarray:
    """Inverse of :func:`pack_mask`; returns a flat boolean array."""
    expected = math.ceil(packed.bit_count / 8)
    if len(packed.data) != expected:
        raise BundleFormatError(
            f"mask {packed.tensor_name!r}: {len(packed.data)} bytes for {packed.bit_count} bits "
            f"(expected {expected})"
        )
    raw = np.frombuffer(packed.data, dtype=np.uint8)
    spare = expected * 8 - packed.bit_count
    if strict and spare and raw[-1] >> (8 - spare):
        raise BundleFormatError(f"mask {packed.tensor_name!r}: nonzero padding bits")
    return np.unpackbits(raw, count=packed.bit_count, bitorder="little").astype(bool)


@dataclass(frozen=True)
class BundleLayout:
    """Byte accounting of a serialized bundle."""

    preamble_bytes: int
    index_bytes: int
    unified_bytes: int
    mask_bytes: int

    @property
    def total(self) -> int:
        return self.preamble_bytes + self.index_bytes + self.unified_bytes + self.mask_bytes


def _finite(value: float) -> float:
    if not math.isfinite(value):
        raise BundleFormatError(f"rescaler {value!r} is not finite")
    return value


def bundle_to_bytes(bundle: EmrBundle) -> tuple[bytes, BundleLayout]:
    if not bundle.base_fingerprint:
        raise BundleFormatError("refusing to serialize a bundle without a base fingerprint")
    tensors = []
    unified_offsets = {}
    unified_chunks = []
    cursor = 0
    for name, arr in bundle.unified.items():
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "dtype": dtype_of(arr).value, "shape": list(arr.shape)})
        unified_offsets[name] = [cursor, cursor + len(raw)]
        unified_chunks.append(raw)
        cursor += len(raw)

    mask_offsets: dict[str, dict[str, list[int]]] = {}
    mask_chunks = []
    cursor = 0
    rescalers: dict[str, object] = {}
    for mod in bundle.modulators:
        packed = pack_mask(mod.mask)
        mask_offsets[mod.label] = {}
        for name in bundle.unified.names:
            data = packed[name].data
            mask_offsets[mod.label][name] = [cursor, cursor + len(data)]
            mask_chunks.append(data)
            cursor += len(data)
        if mod.per_tensor:
            rescalers[mod.label] = {k: _finite(v) for k, v in mod.rescaler.items()}
        else:
            rescalers[mod.label] = _finite(mod.rescaler)

    index = {
        "base_fingerprint": bundle.base_fingerprint,
        "tasks": bundle.labels,
        "tensors": tensors,
        "rescalers": rescalers,
        "unified_offsets": unified_offsets,
        "mask_offsets": mask_offsets,
    }
    if bundle.metadata:
        index["metadata"] = dict(sorted(bundle.metadata.items()))
    blob = json.dumps(index, separators=(",", ":")).encode("utf-8")
    unified = b"".join(unified_chunks)
    masks = b"".join(mask_chunks)
    layout = BundleLayout(_PREAMBLE.size, len(blob), len(unified), len(masks))
    return _PREAMBLE.pack(MAGIC, VERSION, len(blob)) + blob + unified + masks, layout


def save_bundle(bundle: EmrBundle, path: str | Path) -> BundleLayout:
    data, layout = bundle_to_bytes(bundle)
    Path(path).write_bytes(data)
    return layout


def _check_span(span: object, region: int, what: str) -> tuple[int, int]:
    if (
        not isinstance(span, list)
        or len(span) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in span)
    ):
        raise BundleFormatError(f"{what}: invalid offsets {span!r}")
    begin, end = span
    if begin < 0 or end < begin or end > region:
        raise BundleFormatError(f"{what}: offsets {span} out of bounds (region is {region} bytes)")
    return begin, end


def _check_tiling(spans: list[tuple[int, int, str]], region: int, what: str) -> None:
    cursor = 0
    for begin, end, name in sorted(spans):
        if begin != cursor:
            kind = "overlapping" if begin < cursor else "gapped"
            raise BundleFormatError(f"{what}: {kind} data range at {name!r}")
        cursor = end
    if cursor != region:
        raise BundleFormatError(f"{what}: offsets cover {cursor} of {region} bytes")


def bundle_from_bytes(buf: bytes, source: object = "<bytes>", *, strict: bool = True) -> tuple[EmrBundle, BundleLayout]:
    def fail(msg: str) -> BundleFormatError:
        return BundleFormatError(f"{source}: {msg}")

    if len(buf) < _PREAMBLE.size:
        raise fail("truncated preamble")
    magic, version, n = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise fail(f"bad magic {magic!r}")
    if version != VERSION:
        raise fail(f"unsupported version {version}")
    if _PREAMBLE.size + n > len(buf):
        raise fail("truncated index")
    try:
        index = json.loads(buf[_PREAMBLE.size : _PREAMBLE.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise fail(f"malformed index JSON: {exc}") from None
    if not isinstance(index, dict):
        raise fail("index is not an object")
    for key in ("tasks", "tensors", "rescalers", "unified_offsets", "mask_offsets"):
        if key not in index:
            raise fail(f"index missing {key!r}")
    fp = index.get("base_fingerprint")
    if not isinstance(fp, str) or not fp:
        raise fail("base_fingerprint absent")

    try:
        specs = [(t["name"], DType(t["dtype"]), tuple(t["shape"])) for t in index["tensors"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise fail(f"invalid tensor table: {exc}") from None
    for name, _, shape in specs:
        if not isinstance(name, str) or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in shape
        ):
            raise fail(f"invalid tensor table entry {name!r}")
    names = [s[0] for s in specs]
    if names != sorted(names) or len(set(names)) != len(names):
        raise fail("tensor table not in canonical order")
    tasks = index["tasks"]
    if not isinstance(tasks, list) or not tasks or not all(isinstance(t, str) for t in tasks):
        raise fail("tasks must be a non-empty list of labels")

    data = buf[_PREAMBLE.size + n :]
    unified_region = 0
    for _, dtype, shape in specs:
        unified_region += math.prod(shape) * dtype.itemsize
    mask_region = len(tasks) * sum(math.ceil(math.prod(s[2]) / 8) for s in specs)
    if len(data) != unified_region + mask_region:
        raise fail(
            f"data region is {len(data)} bytes, index describes {unified_region + mask_region}"
            + (" (truncated file)" if len(data) < unified_region + mask_region else "")
        )
    uni_data = data[:unified_region]
    mask_data = data[unified_region:]

    unified = {}
    spans = []
    offsets = index["unified_offsets"]
    if not isinstance(offsets, dict) or set(offsets) != set(names):
        raise fail("unified_offsets do not match tensor table")
    for name, dtype, shape in specs:
        b, e = _check_span(offsets[name], unified_region, f"unified {name!r}")
        count = math.prod(shape)
        if e - b != count * dtype.itemsize:
            raise fail(f"unified {name!r}: byte length does not match shape")
        spans.append((b, e, name))
        unified[name] = np.frombuffer(uni_data, dtype=dtype.numpy, count=count, offset=b).reshape(shape)
    try:
        _check_tiling(spans, unified_region, "unified region")
    except BundleFormatError as exc:
        raise fail(str(exc)) from None

    rescalers = index["rescalers"]
    mask_offsets = index["mask_offsets"]
    if not isinstance(mask_offsets, dict) or set(mask_offsets) != set(tasks):
        raise fail("mask_offsets do not match task list")
    if not isinstance(rescalers, dict) or set(rescalers) != set(tasks):
        raise fail("rescalers do not match task list")
    modulators = []
    spans = []
    try:
        for label in tasks:
            per_task = mask_offsets[label]
            if not isinstance(per_task, dict) or set(per_task) != set(names):
                raise BundleFormatError(f"mask_offsets for {label!r} do not match tensor table")
            mask = {}
            for name, _, shape in specs:
                b, e = _check_span(per_task[name], mask_region, f"mask {label!r}/{name!r}")
                packed = PackedMask(name, math.prod(shape), mask_data[b:e])
                mask[name] = unpack_mask(packed, strict=strict).reshape(shape)
                spans.append((b, e, f"{label}/{name}"))
            scale = rescalers[label]
            if isinstance(scale, dict):
                if set(scale) != set(names):
                    raise BundleFormatError(f"per-tensor rescalers for {label!r} do not match tensors")
                scale = {k: float(v) for k, v in scale.items()}
            elif isinstance(scale, (int, float)) and not isinstance(scale, bool):
                scale = float(scale)
            else:
                raise BundleFormatError(f"invalid rescaler for {label!r}: {scale!r}")
            modulators.append(TaskModulator(label, mask, scale))
        _check_tiling(spans, mask_region, "mask region")
    except BundleFormatError as exc:
        raise fail(str(exc)) from None

    meta = index.get("metadata") or {}
    if not isinstance(meta, dict):
        raise fail("metadata must be an object")
    try:
        bundle = EmrBundle(fp, TaskVector(unified, UNIFIED_LABEL), tuple(modulators), meta)
    except Exception as exc:  # schema or label problems surface as format errors
        raise fail(str(exc)) from None
    return bundle, BundleLayout(_PREAMBLE.size, n, unified_region, mask_region)


def load_bundle(path: str | Path, *, strict: bool = True) -> EmrBundle:
    path = Path(path)
    bundle, _ = bundle_from_bytes(path.read_bytes(), path, strict=strict)
    return bundle


def read_layout(path: str | Path) -> BundleLayout:
    path = Path(path)
    _, layout = bundle_from_bytes(path.read_bytes(), path)
    return layout
