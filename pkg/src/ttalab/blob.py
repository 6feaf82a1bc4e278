"""Manifest + raw-float persistence used by checkpoints and dataset caches.

A saved artifact is a directory holding ``manifest`` (JSON: format version,
payload metadata, and a tensor table of name/shape/block_index/offset_bytes/
len_bytes) and ``params.bin`` (concatenated little-endian float32 arrays,
each tensor aligned to a 64-byte boundary). The writer emits a canonical
sequential layout and the reader re-derives it, so any corrupted offset or a
truncated blob is detected rather than silently accepted.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["write_blob", "read_blob", "BlobFormatError", "FORMAT_VERSION"]

FORMAT_VERSION = 1
_ALIGN = 64


class BlobFormatError(ValueError):
    """Manifest/blob pair is malformed, truncated, or inconsistent."""


def _aligned(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def write_blob(path, meta: dict, tensors: list[tuple[str, int, np.ndarray]]) -> None:
    """Write (name, block_index, array) entries under ``path``.

    Arrays are stored as little-endian float32 regardless of input dtype.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    chunks: list[bytes] = []
    for name, block_index, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "block_index": int(block_index),
                "offset_bytes": offset,
                "len_bytes": len(raw),
            }
        )
        padded = _aligned(len(raw))
        chunks.append(raw + b"\x00" * (padded - len(raw)))
        offset += padded
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "tensors": table,
    }
    (root / "manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (root / "params.bin").write_bytes(b"".join(chunks))


def read_blob(path) -> tuple[dict, dict[str, np.ndarray], dict[str, int]]:
    """Read an artifact directory; returns (meta, arrays by name, block index by name)."""
    root = Path(path)
    mpath = root / "manifest"
    bpath = root / "params.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise BlobFormatError(f"missing manifest or params.bin under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise BlobFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BlobFormatError(
            f"format_version {manifest.get('format_version')!r} unsupported (want {FORMAT_VERSION})"
        )
    blob = bpath.read_bytes()
    arrays: dict[str, np.ndarray] = {}
    blocks: dict[str, int] = {}
    expected_offset = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset_bytes"])
        length = int(entry["len_bytes"])
        want = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != want:
            raise BlobFormatError(f"tensor {name!r}: len_bytes {length} != shape implies {want}")
        if offset != expected_offset:
            raise BlobFormatError(
                f"tensor {name!r}: offset_bytes {offset} breaks canonical layout (expected {expected_offset})"
            )
        if offset + length > len(blob):
            raise BlobFormatError(f"tensor {name!r}: blob truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset).reshape(shape)
        arrays[name] = arr.copy()
        blocks[name] = int(entry["block_index"])
        expected_offset = offset + _aligned(length)
    if expected_offset != len(blob):
        raise BlobFormatError(
            f"blob length {len(blob)} inconsistent with manifest total {expected_offset}"
        )
    return manifest.get("meta", {}), arrays, blocks
