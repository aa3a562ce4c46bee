"""Binary checkpoint container shared by every trainable component.

Layout (all integers little-endian):

========  ========================================================
bytes     content
========  ========================================================
4         magic ``b"PDCK"``
4         format version (uint32, currently 1)
4         metadata length M (uint32)
M         metadata, UTF-8 JSON with sorted keys
4         array count N (uint32)
--        then N entries, sorted by name:
2         name length L (uint16)
L         array name, UTF-8
1         ndim (uint8)
4*ndim    shape (uint32 each)
4*numel   float32 payload, little-endian, C order
========  ========================================================

Arrays are stored as float32 regardless of the in-memory dtype; loading
returns float32 arrays and callers cast as needed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDCK"
VERSION = 1


def save_checkpoint(file: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata blob."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(file, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(file: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(file).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{file}: not a checkpoint file (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{file}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += 4 * numel
        arrays[name] = data.copy()
    if offset != len(raw):
        raise ValueError(f"{file}: {len(raw) - offset} trailing bytes")
    return arrays, meta
