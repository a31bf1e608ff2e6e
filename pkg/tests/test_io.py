import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from crowdpatch import io
from crowdpatch.scenes import make_dataset


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=True, width=64)))
def test_tensor_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.pct"
    io.write_tensor(path, arr)
    back = io.read_tensor(path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_tensor_layout_is_little_endian(tmp_path):
    path = tmp_path / "x.pct"
    io.write_tensor(path, np.array([[1.5, -2.0, 0.25]]))
    raw = path.read_bytes()
    assert raw[:4] == b"PCT1"
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<2I", raw[8:16]) == (1, 3)
    assert struct.unpack("<3d", raw[16:]) == (1.5, -2.0, 0.25)


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "x.pct"
    io.write_tensor(path, np.ones(3))
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(io.FormatError, match=r"x\.pct: byte 0: bad tensor magic"):
        io.read_tensor(path)


def test_truncated_payload_names_file_and_offset(tmp_path):
    path = tmp_path / "y.pct"
    io.write_tensor(path, np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(io.FormatError) as err:
        io.read_tensor(path)
    assert "y.pct" in str(err.value) and err.value.offset == 16


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "z.pct"
    io.write_tensor(path, np.ones(2))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(io.FormatError, match="trailing"):
        io.read_tensor(path)


def test_points_round_trip_exactly(tmp_path):
    pts = np.random.default_rng(0).uniform(0, 100, size=(7, 2))
    io.write_points(tmp_path / "p.txt", pts)
    assert np.array_equal(io.read_points(tmp_path / "p.txt"), pts)
    assert (tmp_path / "p.txt").read_text().splitlines()[-1] == "count\t7"


@pytest.mark.parametrize("text, match", [
    ("1.0\t2.0\n", "missing count"),
    ("1.0\t2.0\ncount\t2\n", "count line says 2"),
    ("1.0\tabc\ncount\t1\n", "malformed point"),
    ("count\tx\n", "malformed count"),
    ("count\t0\n1.0\t2.0\n", "after the count"),
])
def test_malformed_points(tmp_path, text, match):
    (tmp_path / "p.txt").write_text(text)
    with pytest.raises(io.FormatError, match=match):
        io.read_points(tmp_path / "p.txt")


def test_dataset_round_trip(tmp_path):
    ds = make_dataset(3, 4, 32, 32, count_range=(0, 5))
    io.write_dataset(tmp_path / "d", ds, {"seed": 3})
    back = io.read_dataset(tmp_path / "d")
    assert len(back) == 4
    for a, b in zip(ds, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.density.tobytes() == b.density.tobytes()
        assert np.array_equal(a.points.reshape(-1, 2), b.points)
        assert a.seed == b.seed
    names, meta = io.read_index(tmp_path / "d")
    assert names == [f"scene_{i:05d}" for i in range(4)] and meta == {"seed": "3"}


def test_empty_dataset(tmp_path):
    io.write_dataset(tmp_path / "e", [])
    assert (tmp_path / "e" / "index.txt").exists()
    assert io.read_dataset(tmp_path / "e") == []


def test_corrupt_record_in_dataset(tmp_path):
    io.write_dataset(tmp_path / "d", make_dataset(1, 2, 32, 32, count_range=(1, 2)))
    (tmp_path / "d" / "scene_00001.den.pct").write_bytes(b"PCT2" + b"\0" * 12)
    with pytest.raises(io.FormatError, match="scene_00001.den.pct"):
        io.read_dataset(tmp_path / "d")


def test_container_round_trip_and_magic(tmp_path):
    path = tmp_path / "m.bin"
    tensors = [np.arange(6.0).reshape(2, 3), np.ones(1)]
    io.write_container(path, io.MODEL_MAGIC, {"arch": "dilated", "seed": "4"}, tensors)
    header, back = io.read_container(path, io.MODEL_MAGIC)
    assert header == {"arch": "dilated", "seed": "4"}
    assert all(np.array_equal(a, b) for a, b in zip(tensors, back))
    with pytest.raises(io.FormatError, match="bad magic"):
        io.read_container(path, io.PATCH_MAGIC)


def test_container_without_header_terminator(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"PCM1arch=x")
    with pytest.raises(io.FormatError, match="blank line"):
        io.read_container(path, io.MODEL_MAGIC)
