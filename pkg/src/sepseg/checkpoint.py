"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic  b"RSSG"
    u32    version (currently 1)
    u32    tensor count
    per tensor, in ascending name order:
        u16    name byte length, then UTF-8 name
        u8     rank
        u32[]  extents (row-major)
        f32[]  payload, row-major

Entries are sorted by name so two saves of the same parameters are
byte-identical regardless of insertion order. Payloads are stored as f32.
"""

import struct

import numpy as np

MAGIC = b"RSSG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        # np.asarray, not ascontiguousarray: the latter promotes rank-0 to
        # rank-1 and would lose scalar parameter shapes. tobytes() already
        # serializes in row-major order for any layout.
        arr = np.asarray(params[name], dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        if any(e > 0xFFFFFFFF for e in arr.shape) or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor too large to encode: {name!r} {arr.shape}")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def load_checkpoint(blob: bytes) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"payload of {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return params


def write_checkpoint(path, params: dict):
    blob = save_checkpoint(params)
    with open(path, "wb") as f:
        f.write(blob)


def read_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        return load_checkpoint(f.read())
