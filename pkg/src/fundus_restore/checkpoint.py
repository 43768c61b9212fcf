"""Self-describing checkpoint container.

Layout::

    MAGIC (8 bytes) | header length (4 bytes, little endian) | header JSON |
    payload (torch.save of a dict of tensors / plain values) | sha256 of everything before (32 bytes)

The header echoes the model config, its hash, the role of the file and the
format version. Any flipped byte fails the trailing digest before anything
is deserialised.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import torch

from .errors import ChecksumError, ConfigMismatchError, VersionMismatchError

MAGIC = b"FRCKPT\x00\x01"
FORMAT_VERSION = 1


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_container(path, payload: dict, role: str, config: dict, extra: dict | None = None):
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "role": role,
        "config": config,
        "config_hash": config_hash(config),
        "payload_bytes": len(body),
        **(extra or {}),
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<I", len(head)) + head + body
    blob += hashlib.sha256(blob).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return header


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(blob: bytes):
    if len(blob) < len(MAGIC) + 4 + 32:
        raise ChecksumError("checkpoint is truncated")
    data, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(data).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    if data[: len(MAGIC)] != MAGIC:
        raise ChecksumError("not a checkpoint container")
    (n,) = struct.unpack("<I", data[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(data[start: start + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    return header, data[start + n:]


def load_container(path, role: str | None = None, expect_config: dict | None = None):
    """Returns (payload dict, header). Verifies checksum, version, role and config echo."""
    header, body = _parse(Path(path).read_bytes())
    if role is not None and header["role"] != role:
        raise ConfigMismatchError(f"checkpoint role is {header['role']!r}, expected {role!r}")
    if expect_config is not None and header["config_hash"] != config_hash(expect_config):
        raise ConfigMismatchError(
            f"checkpoint config hash {header['config_hash']} does not match "
            f"model config hash {config_hash(expect_config)}"
        )
    payload = torch.load(io.BytesIO(body), weights_only=True)
    return payload, header
