"""Binary model checkpoints: named little-endian arrays plus a JSON header.

Layout (all integers little-endian):

    bytes 0-3   magic b"FDCK"
    u32         format version (currently 1)
    u32         header length in bytes
    bytes       UTF-8 JSON header (model configuration, free-form metadata)
    u32         number of arrays
    per array:
        u16     name length, then UTF-8 name
        u8      dtype code: 0 = float32, 1 = float64
        u8      rank
        u32[r]  dimensions
        bytes   raw array data, little-endian, C order
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FDCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, arrays, header=None):
    header_bytes = json.dumps(header or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            code = _CODES.get(arr.dtype.newbyteorder("="))
            if code is None:
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    return arrays, header
