"""Checkpoint files.

Layout: 8-byte magic ``MDFNCKPT``, uint32 LE header length, UTF-8 JSON
header (sorted keys), then each parameter in sorted-name order as
little-endian float32, row-major. The header records the model config,
its hash, step, epoch, seed, a metric snapshot and the (name, shape) list.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MDFNCKPT"
FORMAT_VERSION = 1


def dumps(state, header):
    names = sorted(state)
    header = dict(header)
    header["format"] = FORMAT_VERSION
    header["params"] = [[n, list(np.shape(state[n]))] for n in names]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(state[n], dtype="<f4").tobytes() for n in names)
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def loads(raw, expected_hash=None):
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header.get('config_hash')}, expected {expected_hash}")
    state = {}
    offset = 12 + n
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"checkpoint truncated inside {name}")
        state[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after parameters")
    return header, state


def save(path, state, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(state, header))


def load(path, expected_hash=None):
    path = Path(path)
    if path.is_dir():
        path = path / "best"
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(raw, expected_hash)
