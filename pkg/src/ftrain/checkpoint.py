"""Binary checkpoint format.

Layout: magic "LSF2" (4 bytes), version u32 LE, step u64, tensor_count
u32, then per tensor: name_len u32 + UTF-8 name, dtype tag u8
(0 = binary32, 1 = binary16), rank u8, dims as u64 each, raw
little-endian element bytes. fp16 parameters are stored as raw bit
patterns so a resumed run is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"LSF2"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}


def save_checkpoint(path: str, step: int, tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr)
            tag = _DTYPE_TO_TAG[arr.dtype]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes())


def load_checkpoint(path: str) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic")
    off = 4
    version, = struct.unpack_from("<I", blob, off); off += 4
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    step, = struct.unpack_from("<Q", blob, off); off += 8
    count, = struct.unpack_from("<I", blob, off); off += 4
    tensors = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<I", blob, off); off += 4
        name = blob[off:off + name_len].decode("utf-8"); off += name_len
        tag, rank = struct.unpack_from("<BB", blob, off); off += 2
        if tag not in _TAG_TO_DTYPE:
            raise ParseError(f"{path}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        dtype = _TAG_TO_DTYPE[tag]
        n = int(np.prod(dims)) if dims else 1
        nbytes = n * dtype.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(dims)
        off += nbytes
        tensors[name] = arr.copy()
    return step, tensors
