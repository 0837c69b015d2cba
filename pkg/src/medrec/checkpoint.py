"""Flat binary parameter container with a JSON index.

File layout (documented contract, stable across versions of this package):

    bytes 0..8    little-endian uint64: byte length H of the header
    bytes 8..8+H  UTF-8 JSON header
    bytes 8+H..   payload: little-endian float64 arrays, back to back

Header schema::

    {
      "format_version": 1,
      "meta": { ... arbitrary JSON metadata ... },
      "entries": {
        "<name>": {"shape": [d0, ...], "offset": <byte offset into payload>}
      }
    }

Entries are laid out in sorted-name order and the header is serialized with
sorted keys, so identical inputs produce bitwise-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on malformed checkpoint files."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus JSON metadata to ``path``."""
    entries = {}
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries[name] = {"shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header length field")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header JSON ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    payload = raw[8 + hlen:]
    arrays = {}
    for name, entry in header["entries"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: entry {name!r} overruns payload")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header.get("meta", {})
