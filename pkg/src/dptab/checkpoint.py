"""Binary checkpoint format.

Layout::

    b"DPTT" | u16 version | u32 header length | UTF-8 JSON header
    | little-endian float32 payloads | u64 checksum of the payload bytes

The header holds the model config, a parameter manifest (name, shape, byte
offset, trainable flag, mask spec), PEFT metadata and free-form extras such
as the dataset schema and privacy ledger.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DigestMismatch, TruncatedCheckpoint, VersionMismatch
from .model import ModelConfig, Parameter, TabTransformer

MAGIC = b"DPTT"
FORMAT_VERSION = 1
_PRELUDE = struct.Struct("<4sHI")
_TRAILER = struct.Struct("<Q")


def payload_digest(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _mask_spec(mask):
    if mask is None:
        return None
    u = int(mask[..., :].reshape(-1, mask.shape[-1])[0].sum())
    lead = np.zeros(mask.shape, dtype=bool)
    lead[..., :u] = True
    if np.array_equal(mask, lead):
        return {"kind": "leading_units", "units": u}
    return {"kind": "indices", "indices": np.flatnonzero(mask).tolist()}


def _mask_from_spec(spec, shape):
    if spec is None:
        return None
    mask = np.zeros(shape, dtype=bool)
    if spec["kind"] == "leading_units":
        mask[..., : spec["units"]] = True
    elif spec["kind"] == "indices":
        mask.reshape(-1)[np.asarray(spec["indices"], dtype=np.int64)] = True
    else:
        raise CheckpointError(f"unknown mask kind {spec['kind']!r}")
    return mask


def to_bytes(model: TabTransformer, extra: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        manifest.append({
            "name": name,
            "shape": list(p.data.shape),
            "offset": offset,
            "nbytes": len(raw),
            "trainable": bool(p.trainable),
            "mask": _mask_spec(p.mask),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {
            "config": model.config.to_dict(),
            "parameters": manifest,
            "peft": model.peft,
            "payload_bytes": len(payload),
            "extra": extra or {},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return (
        _PRELUDE.pack(MAGIC, FORMAT_VERSION, len(header))
        + header
        + payload
        + _TRAILER.pack(payload_digest(payload))
    )


def save_checkpoint(model: TabTransformer, path, extra: dict | None = None) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, extra))
    os.replace(tmp, path)
    return path


def from_bytes(blob: bytes) -> tuple[TabTransformer, dict]:
    if len(blob) < _PRELUDE.size:
        raise TruncatedCheckpoint("file shorter than the fixed prelude")
    magic, version, hlen = _PRELUDE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, reader supports {FORMAT_VERSION}")
    start = _PRELUDE.size
    if len(blob) < start + hlen:
        raise TruncatedCheckpoint("header cut short")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    pstart = start + hlen
    plen = int(header["payload_bytes"])
    if len(blob) < pstart + plen + _TRAILER.size:
        raise TruncatedCheckpoint(
            f"expected {pstart + plen + _TRAILER.size} bytes, found {len(blob)}"
        )
    payload = blob[pstart:pstart + plen]
    (stored,) = _TRAILER.unpack_from(blob, pstart + plen)
    if payload_digest(payload) != stored:
        raise DigestMismatch("payload checksum mismatch")
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["parameters"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        params[entry["name"]] = Parameter(
            entry["name"], data, entry["trainable"], _mask_from_spec(entry["mask"], data.shape)
        )
    return TabTransformer(config, params, header["peft"]), header.get("extra", {})


def load_checkpoint(path) -> tuple[TabTransformer, dict]:
    """Return ``(model, extra)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return from_bytes(raw)


def digest_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
