"""Tensor container: round trips, checksums, corruption detection."""

import numpy as np
import pytest

from uttertune.errors import CorruptFile, VersionMismatch
from uttertune.tensorio import load_tensors, save_tensors


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(4,)).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
        "empty": np.zeros((0, 2), dtype=np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    p = tmp_path / "t.bin"
    tensors = sample_tensors()
    meta = {"r": "16", "note": "value with spaces"}
    save_tensors(p, tensors, meta)
    loaded, got_meta = load_tensors(p)
    assert got_meta == meta
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert loaded[name].shape == tensors[name].shape
        assert np.array_equal(
            loaded[name].view(np.uint32), tensors[name].view(np.uint32)
        )


def test_save_deterministic(tmp_path):
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(pa, sample_tensors(), {"k": "v"})
    save_tensors(pb, sample_tensors(), {"k": "v"})
    assert pa.read_bytes() == pb.read_bytes()


def test_checksum_detects_payload_flip(tmp_path):
    p = tmp_path / "t.bin"
    save_tensors(p, sample_tensors(), {})
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        load_tensors(p)


def test_truncation_detected(tmp_path):
    p = tmp_path / "t.bin"
    save_tensors(p, sample_tensors(), {})
    raw = p.read_bytes()
    p.write_bytes(raw[:-40])
    with pytest.raises(CorruptFile):
        load_tensors(p)


def test_tiny_file_rejected(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"short")
    with pytest.raises(CorruptFile):
        load_tensors(p)


def test_version_mismatch(tmp_path):
    import hashlib

    p = tmp_path / "t.bin"
    blob = b"uttertune-tensors v999\nend\n"
    p.write_bytes(blob + hashlib.sha256(blob).digest())
    with pytest.raises(VersionMismatch):
        load_tensors(p)


def test_wrong_magic(tmp_path):
    import hashlib

    p = tmp_path / "t.bin"
    blob = b"something v1\nend\n"
    p.write_bytes(blob + hashlib.sha256(blob).digest())
    with pytest.raises(CorruptFile):
        load_tensors(p)


def test_non_float32_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_tensors(tmp_path / "t.bin", {"x": np.zeros(3, dtype=np.float64)}, {})


def test_bad_names_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_tensors(
            tmp_path / "t.bin", {"a b": np.zeros(1, dtype=np.float32)}, {}
        )
    with pytest.raises(ValueError):
        save_tensors(tmp_path / "t.bin", {}, {"bad key": "v"})


def test_newline_in_meta_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_tensors(tmp_path / "t.bin", {}, {"k": "a\nb"})


def test_empty_container(tmp_path):
    p = tmp_path / "t.bin"
    save_tensors(p, {}, {})
    tensors, meta = load_tensors(p)
    assert tensors == {} and meta == {}
