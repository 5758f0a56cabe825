"""Binary parameter container.

Layout (little-endian)::

    b"FDNN1"  uint32 record_count
    per record: uint32 name_len, name (utf-8), uint32 rank,
                rank x uint64 extents, prod(extents) x float64
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"FDNN1"


class CheckpointError(ValueError):
    pass


def dumps(arrays):
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:5] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:5]!r}, expected {MAGIC!r}")
    pos = 5
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"record {name!r} truncated")
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    return out


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def checksum(arrays):
    """SHA-256 over the serialised form; equal digests mean bit-identical values."""
    return hashlib.sha256(dumps(arrays)).hexdigest()
