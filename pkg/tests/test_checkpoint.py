"""Binary container: bit-exact round trips and metadata handling."""

import numpy as np
import pytest

from speeder.numerics import CheckpointError, load_container, save_container


def test_round_trip_bit_exact(tmp_path, rng):
    arrays = {
        "a.w": rng.normal(size=(7, 3)),
        "a.b": rng.normal(size=(3,)).astype(np.float32),
        "steps": np.array([5], dtype=np.int64),
    }
    meta = {"config_hash": "abc123", "stage": 2, "step": 41}
    path = tmp_path / "model.ckpt"
    save_container(path, arrays, meta)
    loaded, got_meta = load_container(path)
    assert got_meta == meta
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_save_load_save_is_stable(tmp_path, rng):
    arrays = {"x": rng.normal(size=(4, 4))}
    p1 = tmp_path / "one.ckpt"
    p2 = tmp_path / "two.ckpt"
    save_container(p1, arrays, {"k": 1})
    loaded, meta = load_container(p1)
    save_container(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_container(path)


def test_empty_meta_defaults(tmp_path):
    path = tmp_path / "m.ckpt"
    save_container(path, {"z": np.zeros(2)})
    _, meta = load_container(path)
    assert meta == {}
