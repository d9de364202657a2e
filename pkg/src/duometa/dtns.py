"""DTNS tensor files and the checkpoint container built on them.

DTNS record layout (everything little-endian):
    magic "DTNS" | u32 version=1 | u32 rank | u64 extents[rank] | f64 payload

A checkpoint is a single file: one canonical-JSON manifest line terminated by
"\\n", then the concatenated DTNS records. Record offsets in the manifest are
relative to the first byte after the manifest line, so the manifest can be
written before the records without back-patching. All bytes are a pure
function of the stored values, which is what makes rerun-determinism
checkable at the file level.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Iterable

import numpy as np

MAGIC = b"DTNS"
VERSION = 1


class FormatError(RuntimeError):
    """Raised on corrupt or version-mismatched files."""


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


def loads(buf: bytes, offset: int = 0, name: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"{name}: bad magic at offset {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported DTNS version {version}")
    pos = offset + 12
    extents = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = 1
    for e in extents:
        count *= e
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError(f"{name}: truncated payload")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(extents)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    return arr, end


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path: str, arr: np.ndarray) -> None:
    atomic_write(path, dumps(arr))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = loads(buf, 0, name=path)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after record")
    return arr


def save_checkpoint(path: str, records: Iterable[tuple[str, str, np.ndarray]],
                    meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-able ``meta`` block into one file.

    ``records`` yields (name, role, array); names must be unique.
    """
    blobs = []
    entries = []
    offset = 0
    seen = set()
    for name, role, arr in records:
        if name in seen:
            raise ValueError(f"duplicate checkpoint record '{name}'")
        seen.add(name)
        blob = dumps(arr)
        entries.append({"name": name, "role": role, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = canonical_json({"records": entries, "meta": meta or {}}) + "\n"
    atomic_write(path, manifest.encode("utf-8") + b"".join(blobs))


def load_checkpoint(path: str) -> tuple[list[tuple[str, str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad manifest ({e})") from e
    base = nl + 1
    out = []
    for entry in manifest["records"]:
        arr, _ = loads(buf, base + entry["offset"], name=f"{path}:{entry['name']}")
        out.append((entry["name"], entry["role"], arr))
    return out, manifest.get("meta", {})
