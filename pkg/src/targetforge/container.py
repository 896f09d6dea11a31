"""Binary tensor container shared by checkpoints and adversarial-sample files.

Layout: 8-byte magic, u32 little-endian version, u64 little-endian metadata
length, canonical-JSON metadata (UTF-8), then the tensors' float32
little-endian payloads concatenated in metadata order. The metadata carries
a ``tensors`` manifest of (name, shape) so corruption errors can name the
offending tensor. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    """Corrupt or truncated container file."""


class ContainerVersionError(ContainerError):
    """Container written by an unsupported format version."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, magic: bytes, metadata: dict, tensors) -> None:
    """Write named float32 tensors with a metadata blob.

    ``tensors`` is an ordered list of (name, array); names must be unique.
    """
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    meta = dict(metadata)
    meta["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in tensors]
    blob = canonical_json(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path, magic: bytes):
    """Read (metadata, {name: float32 array}) written by ``write_container``."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(8)
        if head != magic:
            raise ContainerError(f"{path}: bad magic {head!r}, expected {magic!r}")
        raw = f.read(4)
        if len(raw) < 4:
            raise ContainerError(f"{path}: truncated header")
        (version,) = struct.unpack("<I", raw)
        if version != VERSION:
            raise ContainerVersionError(
                f"{path}: format version {version}, this build reads {VERSION}"
            )
        raw = f.read(8)
        if len(raw) < 8:
            raise ContainerError(f"{path}: truncated header")
        (meta_len,) = struct.unpack("<Q", raw)
        blob = f.read(meta_len)
        if len(blob) < meta_len:
            raise ContainerError(f"{path}: truncated metadata")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"{path}: unreadable metadata ({e})") from e
        manifest = meta.get("tensors")
        if not isinstance(manifest, list):
            raise ContainerError(f"{path}: metadata missing tensor manifest")
        arrays = {}
        for entry in manifest:
            name, shape = entry["name"], tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            payload = f.read(nbytes)
            if len(payload) < nbytes:
                raise ContainerError(f"{path}: tensor {name!r} payload truncated")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise ContainerError(f"{path}: trailing bytes after last tensor")
    return meta, arrays
