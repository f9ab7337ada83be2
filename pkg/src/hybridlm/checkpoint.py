"""Binary checkpoint format for model weights.

Layout (all integers little-endian):

    magic    4 bytes  b"HYLM"
    version  u32      currently 1
    cfg_len  u32      followed by that many utf-8 bytes of config text
    n_arrays u32
    then per array:
        name_len u16, name utf-8 bytes
        dtype    u8   0 = float64, 1 = float32
        ndim     u8
        dims     u32 each
        data     raw row-major bytes

Round-trips are bitwise: the bytes written for an array are exactly its
``tobytes()`` in the stored dtype, so save followed by load reproduces
every weight with no conversion.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig, format_config, parse_config
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

MAGIC = b"HYLM"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype(np.float64), 1: np.dtype(np.float32)}


def save_checkpoint(path, cfg: ModelConfig, arrays: dict) -> None:
    cfg_bytes = format_config(cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointTruncatedError(
            f"checkpoint ends early while reading {what}"
        )
    return data


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version} is not supported (want {VERSION})"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg_text = _read_exact(fh, cfg_len, "config block").decode("utf-8")
        cfg = parse_config(cfg_text)
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "array header"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name!r}")
            dims = struct.unpack(
                "<" + "I" * ndim, _read_exact(fh, 4 * ndim, f"dims of {name!r}")
            )
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            data = _read_exact(fh, n_bytes, f"data of {name!r}")
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    return cfg, arrays


def expect_shape(name: str, arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape != shape:
        raise CheckpointShapeError(
            f"array {name!r} has shape {arr.shape}, expected {shape}"
        )
    return arr
