import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcb_lab.tensor_store import (
    ManifestError,
    TensorBlock,
    TensorFormatError,
    load_manifest,
    read_tensor,
    read_tensor_header,
    write_manifest,
    write_tensor,
)


def test_float64_roundtrip_and_file_size(tmp_path):
    block = TensorBlock.from_array(np.array([1.0, -1.0]))
    path = tmp_path / "t.tcb"
    write_tensor(block, path)
    assert path.stat().st_size == 4 + 1 + 1 + 8 + 16  # magic, dtype, rank, extent, payload
    back = read_tensor(path)
    assert back.dtype == "float64"
    assert back.shape == (2,)
    assert back.data.tobytes() == block.data.tobytes()


def test_float32_roundtrip_bit_exact(tmp_path):
    block = TensorBlock.from_array(np.array([[1, 2], [3, 4]], dtype=np.float32))
    path = tmp_path / "t.tcb"
    write_tensor(block, path)
    back = read_tensor(path)
    assert back.dtype == "float32"
    assert back.shape == (2, 2)
    np.testing.assert_array_equal(back.as_array(), block.as_array())
    assert back.as_float64().dtype == np.float64


def test_little_endian_layout_is_fixed(tmp_path):
    path = tmp_path / "t.tcb"
    write_tensor(TensorBlock.from_array(np.array([1.0], dtype=np.float32)), path)
    raw = path.read_bytes()
    assert raw[:4] == b"TCB1"
    assert raw[4] == 0  # float32 code
    assert raw[5] == 1  # rank
    assert struct.unpack("<Q", raw[6:14]) == (1,)
    assert raw[14:] == struct.pack("<f", 1.0)


def test_nan_written_but_flagged_on_read(tmp_path):
    path = tmp_path / "t.tcb"
    write_tensor(TensorBlock.from_array(np.array([1.0, math.nan])), path)
    with pytest.raises(TensorFormatError, match="non-finite"):
        read_tensor(path)
    back = read_tensor(path, allow_nonfinite=True)
    assert math.isnan(back.as_array()[1])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.tcb"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.tcb"
    # Declares shape [3] but carries only 2 float64 scalars.
    path.write_bytes(b"TCB1" + struct.pack("<BB", 1, 1) + struct.pack("<Q", 3) + bytes(16))
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.tcb"
    write_tensor(TensorBlock.from_array(np.array([1.0])), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFormatError, match="trailing"):
        read_tensor(path)


def test_rank_limit(tmp_path):
    arr = np.zeros((1,) * 9)
    with pytest.raises(TensorFormatError, match="rank"):
        write_tensor(TensorBlock.from_array(arr), tmp_path / "t.tcb")


def test_block_length_invariant():
    with pytest.raises(TensorFormatError, match="length"):
        TensorBlock(dtype="float64", shape=(3,), data=np.zeros(2))


@settings(max_examples=60, deadline=None)
@given(
    dtype=st.sampled_from(["float32", "float64"]),
    shape=st.lists(st.integers(0, 5), min_size=0, max_size=4),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, dtype, shape, seed):
    rng = np.random.default_rng(seed)
    arr = rng.normal(size=tuple(shape)).astype(dtype)
    block = TensorBlock.from_array(arr)
    path = tmp_path_factory.mktemp("rt") / "t.tcb"
    write_tensor(block, path)
    back = read_tensor(path)
    assert back.dtype == dtype
    assert back.shape == tuple(shape)
    assert back.data.tobytes() == block.data.tobytes()


# --- manifest ----------------------------------------------------------------


def _write_valid_manifest(tmp_path, h_len=3):
    write_tensor(TensorBlock.from_array(np.ones((4, 3))), tmp_path / "W.tcb")
    write_tensor(TensorBlock.from_array(np.ones(h_len)), tmp_path / "h.tcb")
    entries = [
        {"name": "W", "path": "W.tcb", "dtype": "float64", "shape": [4, 3], "role": "W"},
        {"name": "h_step_0000", "path": "h.tcb", "dtype": "float64", "shape": [h_len], "role": "h"},
    ]
    write_manifest(tmp_path / "manifest.json", {"V": 4, "d": 3}, entries)
    return tmp_path / "manifest.json"


def test_manifest_valid(tmp_path):
    manifest = load_manifest(_write_valid_manifest(tmp_path))
    assert manifest.metadata["V"] == 4
    assert [e.name for e in manifest.by_role("h")] == ["h_step_0000"]
    h = manifest.load("h_step_0000")
    assert h.dtype == np.float64 and h.shape == (3,)


def test_manifest_shape_mismatch(tmp_path):
    path = _write_valid_manifest(tmp_path, h_len=5)
    with pytest.raises(ManifestError, match="h_step_0000"):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    path = _write_valid_manifest(tmp_path)
    (tmp_path / "h.tcb").unlink()
    with pytest.raises(ManifestError, match="missing tensor file"):
        load_manifest(path)


def test_manifest_metadata_vd_mismatch(tmp_path):
    path = _write_valid_manifest(tmp_path)
    doc = json.loads(path.read_text())
    doc["metadata"]["V"] = 7
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="W"):
        load_manifest(path)


def test_manifest_rejects_unknown_role(tmp_path):
    path = _write_valid_manifest(tmp_path)
    doc = json.loads(path.read_text())
    doc["entries"][0]["role"] = "bias"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="role"):
        load_manifest(path)


def test_manifest_header_disagreement(tmp_path):
    path = _write_valid_manifest(tmp_path)
    doc = json.loads(path.read_text())
    doc["entries"][1]["dtype"] = "float32"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="declares"):
        load_manifest(path)


def test_read_tensor_header(tmp_path):
    write_tensor(TensorBlock.from_array(np.zeros((2, 5), dtype=np.float32)), tmp_path / "t.tcb")
    assert read_tensor_header(tmp_path / "t.tcb") == ("float32", (2, 5))
