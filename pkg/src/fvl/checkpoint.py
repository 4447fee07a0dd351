"""Checkpoint container: one JSON header line + packed float32 payload.

The header declares name/shape/offset for every tensor, the payload byte
length, and a payload digest; loading validates all three, so truncation
or corruption is detected before any tensor is materialized. Round trips
are bit-exact for float32 data.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .errors import IntegrityError, StateError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict, config_hash: str, extras: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        if hasattr(t, "detach"):
            t = t.detach().cpu().numpy()
        arr = np.asarray(t, dtype="<f4")  # tobytes() below already emits C order
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "extras": extras or {},
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        line = f.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable checkpoint header in {path}") from e


def load_checkpoint(path, expected_config_hash: str | None = None, force: bool = False):
    """Returns (tensors, header). Validates payload length, per-tensor
    offsets, and the payload digest; optionally enforces the config hash."""
    path = Path(path)
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"unreadable checkpoint header in {path}") from e

    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format {header.get('format_version')!r}")
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(
            f"payload length mismatch in {path}: header says {header['payload_bytes']}, file has {len(payload)}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise IntegrityError(f"payload digest mismatch in {path}")

    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        if not force:
            raise StateError(
                f"config hash mismatch loading {path}: checkpoint {header['config_hash'][:12]} vs "
                f"expected {expected_config_hash[:12]}; pass force=True to load anyway"
            )
        logger.warning("loading %s despite config hash mismatch (forced)", path)

    tensors = {}
    for e in header["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(payload):
            raise IntegrityError(f"tensor {e['name']!r} overruns payload in {path}")
        arr = np.frombuffer(payload[start: start + n], dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    return tensors, header
