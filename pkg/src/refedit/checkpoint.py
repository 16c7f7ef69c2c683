"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"FEDT1"  count
    count x [name_len  name_utf8  ndim  dim_0 .. dim_{ndim-1}  float32 payload]

Entries are written in the order given, so a fixed model produces fixed bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FEDT1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, arrays):
    """Write an ordered mapping name -> array."""
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Read a checkpoint into a dict name -> float32 array (file order kept)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    return arrays


def checksum(arrays, prefix=None):
    """Order-independent content hash over entries (optionally filtered by prefix)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if prefix is not None and not name.startswith(prefix):
            continue
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()
