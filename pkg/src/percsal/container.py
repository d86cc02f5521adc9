"""Binary container for named float64 tensors.

Layout: 8-byte magic ``PBALLWTS``, an 8-byte little-endian header length, a
UTF-8 JSON header, then the raw little-endian float64 payloads back to back in
manifest order.  The header is ``{"meta": {...}, "tensors": [{"name", "shape",
"offset"}, ...]}`` with offsets in bytes relative to the payload start.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PBALLWTS"


class ContainerError(ValueError):
    """Malformed, truncated or inconsistent container file."""


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays (insertion order preserved) plus a JSON meta block."""
    manifest = []
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        manifest.append({"name": str(name), "shape": list(arr.shape), "offset": offset})
        raw = arr.astype("<f8").tobytes()
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_tensors(path) -> tuple[dict, dict]:
    """Read a container; returns (meta, {name: ndarray}) in manifest order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise ContainerError(f"{path}: file too short for container header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a tensor container")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    hstart = len(MAGIC) + 8
    if len(blob) < hstart + hlen:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise ContainerError(f"{path}: header missing tensor manifest")
    payload = blob[hstart + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(payload):
            raise ContainerError(f"{path}: truncated payload for tensor '{name}'")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
    return header.get("meta", {}), tensors
