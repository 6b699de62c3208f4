import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from invmark.errors import CorruptionError, FormatError, UnsupportedDTypeError, WriteError
from invmark.tensor_store import (Checkpoint, Tensor, deserialize, read_checkpoint, serialize,
                                  tensor_stats, write_checkpoint)


def _raw(header: dict, data: bytes = b"") -> bytes:
    body = json.dumps(header).encode()
    return struct.pack("<Q", len(body)) + body + data


@st.composite
def checkpoints(draw):
    names = draw(st.lists(st.text("abcxyz._0123", min_size=1, max_size=8), unique=True, max_size=5))
    tensors = {}
    for name in names:
        dtype = draw(st.sampled_from(["F32", "F64"]))
        shape = draw(hnp.array_shapes(min_dims=1, max_dims=2, min_side=1, max_side=5))
        arr = draw(hnp.arrays({"F32": "<f4", "F64": "<f8"}[dtype], shape))  # NaNs and infs included
        tensors[name] = Tensor(name, dtype, arr)
    meta = draw(st.dictionaries(st.text(max_size=5), st.text(max_size=5), max_size=2))
    return Checkpoint(tensors, meta)


@settings(max_examples=150)
@given(checkpoints())
def test_round_trip_is_bitwise(ckpt):
    buf = serialize(ckpt)
    back = deserialize(buf)
    assert back.equals(ckpt)
    assert back.metadata == ckpt.metadata
    assert serialize(back) == buf


def test_single_f32_tensor(tmp_path):
    ckpt = Checkpoint.from_arrays({"a": np.array([[1, 2], [3, 4]])}, "F32")
    write_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = read_checkpoint(tmp_path / "a.ckpt")
    assert back.tensors["a"].dtype == "F32"
    assert back["a"].tobytes() == np.array([[1, 2], [3, 4]], dtype="<f4").tobytes()


def test_empty_checkpoint_bytes():
    buf = serialize(Checkpoint())
    assert buf == struct.pack("<Q", 2) + b"{}"
    assert len(deserialize(buf)) == 0


def test_f64_header_and_width():
    buf = serialize(Checkpoint.from_arrays({"w": np.arange(6.0).reshape(2, 3)}, "F64"))
    (n,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8:8 + n])
    assert header["w"] == {"dtype": "F64", "shape": [2, 3], "data_offsets": [0, 48]}
    assert len(buf) - 8 - n == 48
    assert np.frombuffer(buf[8 + n:], "<f8").tolist() == list(range(6))


def test_serialisation_is_deterministic():
    a = Checkpoint.from_arrays({"x": np.ones(3), "y": np.zeros((2, 2))})
    b = Checkpoint.from_arrays({"x": np.ones(3), "y": np.zeros((2, 2))})
    assert serialize(a) == serialize(b)


def test_order_follows_offsets():
    data = np.float32([1]).tobytes() + np.float32([2]).tobytes()
    buf = _raw({"z": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
                "a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, data)
    assert list(deserialize(buf)) == ["z", "a"]


@pytest.mark.parametrize("buf, exc", [
    (b"\x01\x00", FormatError),
    (struct.pack("<Q", 100) + b"{}", FormatError),
    (struct.pack("<Q", 3) + b"{x}", FormatError),
    (_raw([1, 2]), FormatError),
    (_raw({"a": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, b"\0\0"), UnsupportedDTypeError),
    (_raw({"a": {"dtype": "F32", "shape": [1, 1, 1], "data_offsets": [0, 4]}}, b"\0" * 4), FormatError),
    (_raw({"a": {"dtype": "F32", "shape": [0], "data_offsets": [0, 0]}}), FormatError),
    (_raw({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4), CorruptionError),
    (_raw({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
           "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8), CorruptionError),
    (_raw({"a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8), CorruptionError),
    (_raw({"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 8), CorruptionError),
    (_raw({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4), CorruptionError),
])
def test_malformed_files(buf, exc):
    with pytest.raises(exc):
        deserialize(buf)


def test_write_error(tmp_path):
    with pytest.raises(WriteError):
        write_checkpoint(Checkpoint(), tmp_path / "missing" / "x.ckpt")


def test_replace_casts_and_shares():
    ckpt = Checkpoint.from_arrays({"a": np.ones(2), "b": np.ones(3)}, "F32")
    new = ckpt.replace({"a": np.array([0.1, 0.2])})
    assert new["a"].dtype == np.float32
    assert new.tensors["b"] is ckpt.tensors["b"]


def test_stats_by_hand():
    assert tensor_stats(np.array([0.0, 1, 2, 3])) == (0.0, 3.0, 1.5, math.sqrt(1.25))
    assert tensor_stats(np.array([5.0, 5.0]))[3] == 0.0
    with pytest.raises(ValueError):
        tensor_stats(np.array([]))


def test_stats_against_two_pass_oracle():
    x = np.random.default_rng(0).normal(3.0, 2.0, 10_000).astype(np.float32)
    vals = [float(v) for v in x]
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
    lo, hi, m, s = tensor_stats(Tensor("x", "F32", x))
    assert (lo, hi) == (min(vals), max(vals))
    assert m == pytest.approx(mean, rel=1e-12)
    assert s == pytest.approx(std, rel=1e-12)
