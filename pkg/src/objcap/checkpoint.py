"""Deterministic binary containers for checkpoints and grid dumps.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header
(version, kind, meta, array manifest with dtype/shape/offset), then raw
array bytes in manifest order. No timestamps anywhere, so identical state
serializes to identical bytes.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"OBJCAP01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(path, kind: str, arrays: dict[str, np.ndarray],
                   meta: dict | None = None) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        blob = a.tobytes()
        manifest.append({
            "name": name,
            "dtype": a.dtype.str,   # includes byte order
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": manifest,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(hb)).tobytes())
        f.write(hb)
        for blob in blobs:
            f.write(blob)


def load_container(path, expect_kind: str | None = None):
    """Returns (arrays dict, meta dict). Verifies magic, version, and sizes."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (hlen,) = np.frombuffer(f.read(8), dtype="<u8")
        header = json.loads(f.read(int(hlen)).decode())
        if header.get("version") != VERSION:
            raise CheckpointError(f"unsupported container version {header.get('version')}")
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise CheckpointError(
                f"container kind '{header.get('kind')}', expected '{expect_kind}'")
        data = f.read()
    arrays = {}
    for m in header["arrays"]:
        start, n = m["offset"], m["nbytes"]
        if start + n > len(data):
            raise CheckpointError(f"truncated container: array '{m['name']}'")
        arr = np.frombuffer(data[start:start + n], dtype=m["dtype"])
        arrays[m["name"]] = arr.reshape(m["shape"]).copy()
    return arrays, header.get("meta", {}), header.get("kind")
