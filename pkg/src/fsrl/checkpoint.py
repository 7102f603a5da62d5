"""Binary checkpoints: a JSON manifest followed by little-endian float32 tensors.

Layout::

    b"FSRLCKPT" | uint32 version | uint64 manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor's name, shape, dtype and byte offset into the
payload, the snapshot of the config that produced it, and the SHA-256 of the
payload. Loading checks magic, version, manifest, payload length and hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FSRLCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPE = "<f4"


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    *,
    kind: str,
    config: Mapping | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write ``tensors`` at 32-bit precision with the config snapshot in the manifest."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype=_DTYPE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if not np.isfinite(arr).all():
            raise ValueError(f"tensor {name!r} has non-finite values")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tensors": entries,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; tensors come back as float64 arrays."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: manifest version {manifest.get('format_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    payload = blob[start + mlen :]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {manifest['payload_bytes']}")
    if len(payload) > manifest["payload_bytes"]:
        raise CheckpointIntegrityError(f"{path}: trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload hash mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != _DTYPE:
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPE).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64)
    return Checkpoint(manifest["kind"], tensors, manifest["config"], manifest["meta"])
