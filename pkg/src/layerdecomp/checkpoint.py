"""Single-file checkpoints: 8-byte length, JSON header, raw little-endian payloads.

Header layout::

    {"format_version": 1,
     "tensors": [{"name": ..., "shape": [...], "dtype": "<f4", "offset": ..., "nbytes": ...}, ...],
     "meta": {...}}

Payloads follow the header back to back in header order; offsets are
relative to the first payload byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import StackLoadError, ValidationError

FORMAT_VERSION = 1
_MAGIC = b"LDCKPT01"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind != "f":
            raise ValidationError(f"checkpoint tensor {name} has non-float dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors map name -> numpy array."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StackLoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != _MAGIC or len(buf) < 16:
        raise StackLoadError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StackLoadError(f"corrupt checkpoint header in {path}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise StackLoadError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise StackLoadError(f"truncated payload for {e['name']} in {path}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header.get("meta", {})
