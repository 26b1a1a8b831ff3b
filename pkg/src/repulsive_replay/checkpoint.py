"""Binary checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header
(sorted keys), then the float64 little-endian tensor payloads back to back.
The header lists each tensor's name, shape and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RRCKPT01"


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file: bad magic", 0)
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("truncated header length", len(raw))
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"truncated header: need {hlen} bytes", len(raw))
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt header: {err}", pos) from None
    pos += hlen
    tensors = {}
    expected = 0
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        start = pos + entry["offset"]
        if entry["offset"] != expected:
            raise CheckpointError(f"tensor {entry['name']!r} has inconsistent offset", start)
        if len(raw) < start + nbytes:
            raise CheckpointError(f"truncated payload for tensor {entry['name']!r}", len(raw))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                                               offset=start).reshape(shape).astype(np.float64)
        expected += nbytes
    if len(raw) != pos + expected:
        raise CheckpointError("trailing bytes after payload", pos + expected)
    return header["meta"], tensors


def write(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(meta, tensors))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
