"""Binary tensor format round-trips and header validation."""

import struct

import numpy as np
import pytest

from convprompt import serialize


def test_tensor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(), (5,), (3, 4), (2, 3, 4)]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.bin"
        serialize.save_tensor(path, arr)
        back = serialize.load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_tensor_header_layout():
    arr = np.arange(6.0).reshape(2, 3)
    blob = serialize.dumps_tensor(arr)
    assert blob[:4] == b"CPT1"
    assert struct.unpack_from("<I", blob, 4) == (2,)
    assert struct.unpack_from("<II", blob, 8) == (2, 3)
    assert np.frombuffer(blob[16:], dtype="<f8").tolist() == list(range(6))


def test_bad_magic_rejected():
    with pytest.raises(ValueError):
        serialize.loads_tensor(b"XXXX" + b"\x00" * 16)


def test_archive_round_trip_with_manifest(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"w": rng.normal(size=(4, 2)), "b": rng.normal(size=2),
               "scalar": np.array(3.5)}
    manifest = {"note": "fixture", "n": 3}
    path = tmp_path / "a.bin"
    serialize.save_archive(path, tensors, manifest)
    back, mani = serialize.load_archive(path)
    assert mani == manifest
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])


def test_multiple_tensors_stream_offsets():
    buf = serialize.dumps_tensor(np.ones(3)) + serialize.dumps_tensor(np.zeros((2, 2)))
    first, off = serialize.loads_tensor(buf, 0)
    second, end = serialize.loads_tensor(buf, off)
    assert np.array_equal(first, np.ones(3))
    assert np.array_equal(second, np.zeros((2, 2)))
    assert end == len(buf)
