import numpy as np
import pytest

from streakfix import tensorfile
from streakfix.errors import InputError


def _sample_tensors():
    rng = np.random.default_rng(7)
    return {
        "conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "conv.bias": rng.standard_normal(4).astype(np.float32),
        "scalarish": np.float32(2.5).reshape(()),
    }


def test_roundtrip_bit_identical(tmp_path):
    path = tmp_path / "t.svcp"
    tensors = _sample_tensors()
    tensorfile.save_tensors(path, tensors, meta={"epoch": 3})
    loaded, meta = tensorfile.load_tensors(path)
    assert meta == {"epoch": 3}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], tensors[name])


def test_write_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.svcp", tmp_path / "b.svcp"
    tensors = _sample_tensors()
    tensorfile.save_tensors(a, tensors, meta={"k": 1})
    # Insert keys in a different order; stored order must not depend on it.
    reordered = {name: tensors[name] for name in reversed(list(tensors))}
    tensorfile.save_tensors(b, reordered, meta={"k": 1})
    assert a.read_bytes() == b.read_bytes()


def test_float64_input_stored_as_float32(tmp_path):
    path = tmp_path / "t.svcp"
    tensorfile.save_tensors(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    loaded, _ = tensorfile.load_tensors(path)
    assert loaded["x"].dtype == np.float32


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.svcp"
    tensorfile.save_tensors(path, {"x": np.zeros(2, np.float32)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(InputError, match="magic"):
        tensorfile.load_tensors(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.svcp"
    tensorfile.save_tensors(path, {"x": np.zeros(8, np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(InputError, match="truncated"):
        tensorfile.load_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.svcp"
    tensorfile.save_tensors(path, {"x": np.zeros(2, np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(InputError, match="trailing"):
        tensorfile.load_tensors(path)


def test_sha256_matches_hashlib(tmp_path):
    import hashlib

    path = tmp_path / "t.svcp"
    tensorfile.save_tensors(path, {"x": np.arange(5, dtype=np.float32)})
    assert tensorfile.sha256_of(path) == hashlib.sha256(path.read_bytes()).hexdigest()
