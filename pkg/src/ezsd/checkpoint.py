"""Single-file container of named float32 arrays with a JSON header.

Layout::

    b"EZSDCKPT" | uint32 version | uint64 header length | header JSON | payload

The header lists ``{"name", "shape", "offset", "nbytes"}`` per array (offsets
relative to the payload start) plus a free-form ``meta`` object. All integers
and array payloads are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EZSDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in arrays:
        a = np.ascontiguousarray(np.asarray(arrays[name]), dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"arrays": entries, "meta": dict(meta or {}),
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(arrays, meta)``.

    Raises:
        CheckpointError: bad magic, version, truncation or payload hash.
    """
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<IQ", data, 8)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 8 + 12
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    payload = data[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header.get("meta", {})
