"""``VOXV1`` binary volume container.

Layout, all little-endian::

    b"VOXV1" | x:u32 | y:u32 | z:u32 | channels:u32 | dtype:u32 | payload

The payload is voxel-major in linear-index order with channels contiguous
per voxel. Dtype codes: 1 float32, 2 uint16, 3 uint8, 4 float64 (used for
checkpoints, which must round-trip parameters exactly).
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VOXV1"
_HEADER = struct.Struct("<5I")
HEADER_SIZE = len(MAGIC) + _HEADER.size

DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<u2"),
    3: np.dtype("u1"),
    4: np.dtype("<f8"),
}


class ContainerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VolumeContainer:
    dims: tuple  # (x, y, z)
    data: np.ndarray  # (x*y*z, channels)
    dtype_code: int

    @property
    def channels(self):
        return self.data.shape[1]

    def encode(self) -> bytes:
        return encode(self.data, self.dims, self.dtype_code)


def _as_2d(data, dims):
    arr = np.asarray(data)
    n = int(np.prod(dims))
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ContainerError(f"data of shape {arr.shape} does not fit dims {tuple(dims)}")
    return arr


def encode(data, dims, dtype_code) -> bytes:
    if dtype_code not in DTYPES:
        raise ContainerError(f"unknown dtype code {dtype_code}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise ContainerError(f"dims must be three positive ints, got {dims}")
    arr = _as_2d(data, dims)
    target = DTYPES[dtype_code]
    if target.kind in "ui":
        info = np.iinfo(target)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ContainerError(f"values outside the {target} range")
    payload = np.ascontiguousarray(arr, dtype=target).tobytes()
    return MAGIC + _HEADER.pack(*dims, arr.shape[1], dtype_code) + payload


def decode(buf: bytes) -> VolumeContainer:
    if len(buf) < HEADER_SIZE or buf[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a VOXV1 container")
    x, y, z, channels, code = _HEADER.unpack_from(buf, len(MAGIC))
    if code not in DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dtype = DTYPES[code]
    expected = x * y * z * channels * dtype.itemsize
    payload = buf[HEADER_SIZE:]
    if len(payload) != expected:
        raise ContainerError(f"payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(x * y * z, channels)
    return VolumeContainer((x, y, z), data, code)


def write_volume(path, data, dims, dtype_code):
    Path(path).write_bytes(encode(data, dims, dtype_code))


def read_volume(path) -> VolumeContainer:
    return decode(Path(path).read_bytes())


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE or head[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a VOXV1 container")
    x, y, z, channels, code = _HEADER.unpack_from(head, len(MAGIC))
    return {"dims": (x, y, z), "channels": channels, "dtype": code}
