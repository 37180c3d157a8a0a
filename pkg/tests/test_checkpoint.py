"""Binary checkpoint format: exact round-trips and corruption detection."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from cora.checkpoint import (
    MAGIC,
    CheckpointError,
    checksum_params,
    load_checkpoint,
    save_checkpoint,
)
from cora.tensor import Rng, Tensor


def test_round_trip_is_bit_exact(tmp_path):
    rng = Rng(0)
    named = {
        "scalar": np.float64(3.25),
        "vector": rng.normal((7,)),
        "matrix": rng.normal((5, 3)),
        "tensor3": rng.normal((2, 3, 4)),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, named)
    back = load_checkpoint(path)
    assert set(back) == set(named)
    for name, value in named.items():
        arr = np.asarray(value, dtype=np.float64)
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_rank_zero_shape_preserved(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, {"x": np.float64(1.5)})
    back = load_checkpoint(path)
    assert back["x"].shape == ()
    assert back["x"] == 1.5


def test_tensor_values_accepted(tmp_path):
    t = Tensor(Rng(3).normal((4, 4)), requires_grad=True)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": t})
    assert np.array_equal(load_checkpoint(path)["w"], t.data)


def test_non_contiguous_input_round_trips(tmp_path):
    base = Rng(5).normal((6, 6))
    view = base[::2, ::2]
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"w": view})
    assert np.array_equal(load_checkpoint(path)["w"], view)


def test_reencode_is_byte_identical(tmp_path):
    named = {"a": Rng(7).normal((3, 3)), "b": Rng(8).normal((2,))}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, named)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, {"w": np.ones(2)})
    raw = bytearray(path.read_bytes())
    raw[:5] = b"NOPE!"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "ver.ckpt"
    path.write_bytes(MAGIC + struct.pack("<I", 99))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checksum_tracks_content():
    a = {"w": np.ones((2, 2)), "b": np.zeros(3)}
    b = {"w": np.ones((2, 2)), "b": np.zeros(3)}
    assert checksum_params(a) == checksum_params(b)
    b["b"] = b["b"].copy()
    b["b"][0] = 1e-300
    assert checksum_params(a) != checksum_params(b)


def test_checksum_sensitive_to_names_and_shapes():
    base = checksum_params({"w": np.zeros(4)})
    assert checksum_params({"v": np.zeros(4)}) != base
    assert checksum_params({"w": np.zeros((2, 2))}) != base
