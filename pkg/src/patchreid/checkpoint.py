"""Binary checkpoint format shared by every persisted array in the project.

Layout: 8-byte magic "DPEF0001", entry count (little-endian uint64), then
per entry: name length (uint64), UTF-8 name bytes, rank (uint64), extents
(uint64 each), float32 little-endian payload. Entries are written in sorted
name order so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPEF0001"


class CheckpointError(ValueError):
    """Bad magic/version, truncation, or malformed entries."""


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    blobs = [MAGIC, struct.pack("<Q", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        blobs.append(struct.pack("<Q", len(raw_name)))
        blobs.append(raw_name)
        blobs.append(struct.pack("<Q", arr.ndim))
        for ext in arr.shape:
            blobs.append(struct.pack("<Q", ext))
        blobs.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated before header")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"bad checkpoint magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError("checkpoint truncated mid-entry")
        chunk = buf[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n_vals = int(np.prod(shape)) if shape else 1
        payload = take(4 * n_vals)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(buf):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out
