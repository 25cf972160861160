import dataclasses
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emrmerge import emr_merge, load_bundle, pack_mask, save_bundle, unpack_mask
from emrmerge.errors import BundleFormatError
from emrmerge.modulator_store import PackedMask, bundle_from_bytes, bundle_to_bytes, read_layout
from emrmerge.task_vector import TaskVectorSet

FP = "sha256:" + "ab" * 32


def bundles_equal(a, b) -> bool:
    if a.base_fingerprint != b.base_fingerprint or a.labels != b.labels or a.metadata != b.metadata:
        return False
    for name in a.unified.names:
        x, y = a.unified[name], b.unified[name]
        if x.dtype != y.dtype or x.tobytes() != y.tobytes():
            return False
    for ma, mb in zip(a.modulators, b.modulators):
        if ma.rescaler != mb.rescaler:
            return False
        if any(not np.array_equal(ma.mask[n], mb.mask[n]) for n in a.unified.names):
            return False
    return True


def two_task_bundle():
    return emr_merge(TaskVectorSet.from_arrays([[1.0, -2.0], [3.0, 1.0]], base_fingerprint=FP))


class TestPacking:
    def test_lsb_first(self):
        packed = pack_mask(np.array([1, 0, 1, 1, 0, 0, 0, 0], bool))
        assert packed.data == bytes([0x0D])

    def test_partial_byte(self):
        packed = pack_mask(np.ones(9, bool))
        assert packed.data == bytes([0xFF, 0x01])
        assert packed.bit_count == 9

    def test_roundtrip(self, rng):
        bits = rng.random(1001) < 0.3
        assert np.array_equal(unpack_mask(pack_mask(bits)), bits)

    def test_unpack_examples(self):
        assert unpack_mask(PackedMask("w", 8, bytes([0x0D]))).astype(int).tolist() == [1, 0, 1, 1, 0, 0, 0, 0]
        assert unpack_mask(PackedMask("w", 9, bytes([0xFF, 0x01]))).all()

    def test_large_roundtrip(self, rng):
        bits = rng.random(100_000) < 0.5
        assert np.array_equal(unpack_mask(pack_mask(bits)), bits)

    def test_empty(self):
        packed = pack_mask(np.zeros(0, bool))
        assert packed.data == b"" and unpack_mask(packed).size == 0

    def test_nonzero_padding_rejected(self):
        bad = PackedMask("w", 9, bytes([0xFF, 0x03]))
        with pytest.raises(BundleFormatError, match="padding"):
            unpack_mask(bad)
        assert unpack_mask(bad, strict=False).sum() == 9

    def test_wrong_length(self):
        with pytest.raises(BundleFormatError, match="expected 2"):
            unpack_mask(PackedMask("w", 9, b"\0"))

    def test_dict_input_sorted(self):
        packed = pack_mask({"b": np.ones(2, bool), "a": np.zeros(3, bool)})
        assert list(packed) == ["a", "b"]


class TestBundleFile:
    def test_hand_example_roundtrip(self, tmp_path):
        bundle = two_task_bundle()
        path = tmp_path / "b.emr"
        layout = save_bundle(bundle, path)
        back = load_bundle(path)
        assert bundles_equal(bundle, back)
        assert back.modulator("task1").rescaler == 4 / 3
        assert layout.total == path.stat().st_size
        assert layout.unified_bytes == 16 and layout.mask_bytes == 2
        assert read_layout(path) == layout

    def test_preamble(self):
        data, _ = bundle_to_bytes(two_task_bundle())
        magic, version, n = struct.unpack_from("<4sIQ", data)
        assert magic == b"EMRB" and version == 1
        index = json.loads(data[16 : 16 + n])
        assert index["base_fingerprint"] == FP
        assert index["tasks"] == ["task0", "task1"]

    def test_missing_fingerprint_refused(self):
        bundle = emr_merge(TaskVectorSet.from_arrays([[1.0]]))
        with pytest.raises(BundleFormatError, match="fingerprint"):
            bundle_to_bytes(bundle)

    def test_per_tensor_rescalers(self, rng):
        tasks = TaskVectorSet.from_arrays(
            [{"a": rng.standard_normal(5), "b": rng.standard_normal(3)} for _ in range(2)], base_fingerprint=FP
        )
        bundle = emr_merge(tasks, per_tensor_rescaler=True)
        data, _ = bundle_to_bytes(bundle)
        assert bundles_equal(bundle, bundle_from_bytes(data)[0])

    def test_metadata_kept(self):
        bundle = dataclasses.replace(two_task_bundle(), metadata={"k": "v"})
        data, _ = bundle_to_bytes(bundle)
        assert bundle_from_bytes(data)[0].metadata == {"k": "v"}

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda d: d[:10], "truncated preamble"),
            (lambda d: d[:-1], "truncated"),
            (lambda d: b"XXXX" + d[4:], "bad magic"),
            (lambda d: d[:4] + struct.pack("<I", 2) + d[8:], "unsupported version"),
            (lambda d: d + b"\0", "data region"),
        ],
    )
    def test_corrupt(self, mutate, message):
        data, _ = bundle_to_bytes(two_task_bundle())
        with pytest.raises(BundleFormatError, match=message):
            bundle_from_bytes(mutate(data))

    def test_padding_bits_in_file(self):
        data = bytearray(bundle_to_bytes(two_task_bundle())[0])
        data[-1] |= 0x80
        with pytest.raises(BundleFormatError, match="padding"):
            bundle_from_bytes(bytes(data))
        bundle_from_bytes(bytes(data), strict=False)

    def _rewrite_index(self, fn):
        data, _ = bundle_to_bytes(two_task_bundle())
        (n,) = struct.unpack_from("<Q", data, 8)
        index = json.loads(data[16 : 16 + n])
        fn(index)
        blob = json.dumps(index).encode()
        return data[:8] + struct.pack("<Q", len(blob)) + blob + data[16 + n :]

    def test_empty_fingerprint_rejected(self):
        with pytest.raises(BundleFormatError, match="base_fingerprint absent"):
            bundle_from_bytes(self._rewrite_index(lambda i: i.update(base_fingerprint="")))

    def test_overlapping_masks_rejected(self):
        def clash(index):
            index["mask_offsets"]["task1"]["w"] = [0, 1]

        with pytest.raises(BundleFormatError, match="overlapping"):
            bundle_from_bytes(self._rewrite_index(clash))

    def test_bad_rescaler_type(self):
        with pytest.raises(BundleFormatError, match="invalid rescaler"):
            bundle_from_bytes(self._rewrite_index(lambda i: i["rescalers"].update(task0="x")))

    def test_size_formula(self):
        rng = np.random.default_rng(0)
        n, d = 8, 100_000
        tasks = TaskVectorSet.from_arrays(
            [rng.standard_normal(d).astype(np.float32) for _ in range(n)], base_fingerprint=FP
        )
        _, layout = bundle_to_bytes(emr_merge(tasks))
        assert layout.mask_bytes == n * -(-d // 8)
        assert layout.unified_bytes == 4 * d
        assert layout.total == 16 + layout.index_bytes + 4 * d + n * -(-d // 8)


_shapes = st.lists(st.lists(st.integers(0, 5), max_size=3), min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(shapes=_shapes, n=st.integers(1, 5), seed=st.integers(0, 2**32 - 1), f32=st.booleans())
def test_bundle_roundtrip_property(shapes, n, seed, f32):
    rng = np.random.default_rng(seed)
    dtype = np.float32 if f32 else np.float64
    vectors = [
        {f"t{i}": rng.standard_normal(tuple(s)).astype(dtype) for i, s in enumerate(shapes)} for _ in range(n)
    ]
    bundle = emr_merge(TaskVectorSet.from_arrays(vectors, base_fingerprint=FP))
    data, layout = bundle_to_bytes(bundle)
    back, layout2 = bundle_from_bytes(data)
    assert layout == layout2 and layout.total == len(data)
    assert bundles_equal(bundle, back)
