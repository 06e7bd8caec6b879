"""Binary checkpoint format: round trips, integrity, mismatch handling."""

import numpy as np
import pytest

from sideshap.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    fnv1a_64,
    load_checkpoint,
    save_checkpoint,
)


def sample_state(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "a.bias": rng.standard_normal(4).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }


def test_fnv1a_known_vectors():
    # standard FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_roundtrip_bit_identical(tmp_path):
    path = tmp_path / "m.ckpt"
    state = sample_state()
    save_checkpoint(path, "classifier", {"model": {"depth": 2}}, state)
    back = load_checkpoint(path)
    assert back.role == "classifier"
    assert back.version == FORMAT_VERSION
    assert back.config == {"model": {"depth": 2}}
    assert set(back.state) == set(state)
    for k in state:
        assert back.state[k].tobytes() == np.asarray(state[k], dtype="<f4").tobytes()
        assert back.state[k].shape == np.asarray(state[k]).shape


def test_identical_states_produce_identical_files(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, "surrogate", {"x": 1}, sample_state(3))
    save_checkpoint(p2, "surrogate", {"x": 1}, sample_state(3))
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_is_first_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "classifier", {}, sample_state())
    assert path.read_bytes()[:4] == MAGIC


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "classifier", {}, sample_state())
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupted_payload_fails_digest(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "classifier", {}, sample_state())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_role_mismatch_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "surrogate", {}, sample_state())
    with pytest.raises(CheckpointError, match="role"):
        load_checkpoint(path, expected_role="explainer")
    assert load_checkpoint(path, expected_role="surrogate").role == "surrogate"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "classifier", {}, sample_state())
    blob = bytearray(path.read_bytes())
    blob[:4] = b"ZZZZ"
    # keep the digest consistent so the magic check is what fires
    import struct

    from sideshap.checkpoint import fnv1a_64 as digest
    body = bytes(blob[:-8])
    path.write_bytes(body + struct.pack("<Q", digest(body)))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IOError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_float64_inputs_are_stored_as_float32(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "classifier", {}, {"w": np.ones(3, dtype=np.float64)})
    back = load_checkpoint(path)
    assert back.state["w"].dtype == np.float32
