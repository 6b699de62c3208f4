"""Named-tensor checkpoints and their on-disk container.

File layout::

    [8 bytes]  little-endian u64 header length n
    [n bytes]  UTF-8 JSON: {name: {"dtype", "shape", "data_offsets": [begin, end)}, ...}
               plus an optional "__metadata__" string map
    [rest]     raw little-endian data, offsets relative to the start of this region

The writer emits sorted keys with compact separators and lays the data out in
checkpoint order, so serialisation is a pure function of the checkpoint.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import CorruptionError, FormatError, UnsupportedDTypeError, WriteError

DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class Tensor:
    name: str
    dtype: str
    array: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise UnsupportedDTypeError(f"unsupported dtype {self.dtype!r}")
        if self.array.ndim not in (1, 2):
            raise FormatError(f"tensor {self.name!r} has rank {self.array.ndim}; only 1 or 2 supported")
        if self.array.dtype != DTYPES[self.dtype]:
            object.__setattr__(self, "array", np.ascontiguousarray(self.array, dtype=DTYPES[self.dtype]))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.array, dtype=DTYPES[self.dtype]).tobytes()


@dataclass(frozen=True)
class Checkpoint:
    """Ordered mapping of tensors; iteration order is the serialised order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F32",
                    metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        tensors = {name: Tensor(name, dtype, np.asarray(a)) for name, a in arrays.items()}
        return cls(tensors, dict(metadata or {}))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].array

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def float64(self) -> dict[str, np.ndarray]:
        return {name: t.array.astype(np.float64) for name, t in self.tensors.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "Checkpoint":
        """New checkpoint with some tensors replaced, cast back to their stored dtype.

        Tensors not named in ``arrays`` are shared with ``self``, untouched.
        """
        tensors = dict(self.tensors)
        for name, arr in arrays.items():
            old = tensors[name]
            if arr.shape != old.array.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {old.array.shape}")
            tensors[name] = Tensor(name, old.dtype, np.ascontiguousarray(arr, dtype=DTYPES[old.dtype]))
        return Checkpoint(tensors, dict(self.metadata))

    def astype(self, dtype: str) -> "Checkpoint":
        return Checkpoint({n: Tensor(n, dtype, t.array) for n, t in self.tensors.items()},
                          dict(self.metadata))

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of names, order, dtypes and data."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.to_bytes() == b.to_bytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))


def serialize(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name, t in ckpt.tensors.items():
        raw = t.to_bytes()
        header[name] = {"dtype": t.dtype, "shape": list(t.shape),
                        "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if ckpt.metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in ckpt.metadata.items()}
    body = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(body)) + body + b"".join(chunks)


def deserialize(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise FormatError("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", buf[:8])
    if 8 + n > len(buf):
        raise FormatError(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()):
        raise FormatError("__metadata__ must be a string-to-string map")

    data = memoryview(buf)[8 + n:]
    entries = []
    for name, info in header.items():
        try:
            dtype, shape, (begin, end) = info["dtype"], info["shape"], info["data_offsets"]
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed entry for {name!r}") from exc
        if dtype not in DTYPES:
            raise UnsupportedDTypeError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if (not isinstance(shape, list) or len(shape) not in (1, 2)
                or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)):
            raise FormatError(f"tensor {name!r} has invalid shape {shape!r}")
        if not all(isinstance(o, int) and not isinstance(o, bool) for o in (begin, end)):
            raise FormatError(f"tensor {name!r} has non-integer offsets")
        if not 0 <= begin <= end <= len(data):
            raise CorruptionError(f"tensor {name!r} offsets [{begin}, {end}) out of bounds")
        if end - begin != math.prod(shape) * DTYPES[dtype].itemsize:
            raise CorruptionError(f"tensor {name!r} byte length does not match its shape")
        entries.append((begin, end, name, dtype, shape))

    entries.sort()
    cursor = 0
    tensors = {}
    for begin, end, name, dtype, shape in entries:
        if begin != cursor:
            kind = "overlap" if begin < cursor else "gap"
            raise CorruptionError(f"data {kind} before tensor {name!r} at offset {begin}")
        arr = np.frombuffer(data[begin:end], dtype=DTYPES[dtype]).reshape(shape).copy()
        tensors[name] = Tensor(name, dtype, arr)
        cursor = end
    if cursor != len(data):
        raise CorruptionError(f"{len(data) - cursor} trailing bytes after the last tensor")
    return Checkpoint(tensors, dict(metadata))


def read_checkpoint(path: str | Path) -> Checkpoint:
    return deserialize(Path(path).read_bytes())


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    try:
        Path(path).write_bytes(serialize(ckpt))
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def tensor_stats(t: Tensor | np.ndarray) -> tuple[float, float, float, float]:
    """Population (min, max, mean, std) in double precision."""
    arr = t.array if isinstance(t, Tensor) else np.asarray(t)
    if arr.size == 0:
        raise ValueError("statistics of an empty tensor are undefined")
    x = arr.astype(np.float64).ravel()
    mean = float(x.mean())
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    return float(x.min()), float(x.max()), mean, std
