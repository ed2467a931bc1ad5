"""Binary checkpoint format.

Layout: magic b"TPRD3", u32 version, u32 record count, then per record
u32 name length, UTF-8 name, u32 rank, u32 dims[rank], and the float64
payload. All integers and floats are little-endian. Records are written
in sorted name order so identical parameter dicts produce identical bytes.
"""

import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"TPRD3"
VERSION = 1


def save(path, params):
    """Write {name: Tensor-or-ndarray} to path."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            arr = np.asarray(getattr(arr, "array", arr), dtype=np.float64)
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path):
    """Read a checkpoint back into {name: float64 ndarray}."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic {data[:5]!r}")
    pos = 5
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    if pos != len(data):
        raise ConfigError(f"{path}: {len(data) - pos} trailing bytes")
    return out
