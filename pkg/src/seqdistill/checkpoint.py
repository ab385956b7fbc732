"""Self-describing binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, UTF-8 JSON
manifest, then the concatenated little-endian arrays. The manifest carries
the array directory (name -> shape/dtype/offset/length), a sha256 of the
array blob, a config snapshot, and content-hash references to any frozen
dependencies. Save -> load round-trips are bit-exact; writes are atomic.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from seqdistill.errors import IntegrityError, MigrationError

MAGIC = b"SQDCKPT\x00"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"),
           "<i4": np.dtype("<i4"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    kind: str
    arrays: dict
    config: dict = field(default_factory=dict)
    deps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    content_hash: str = ""


def _canonical(arr):
    arr = np.ascontiguousarray(arr)
    code = {"float32": "<f4", "float64": "<f8",
            "int32": "<i4", "int64": "<i8"}.get(arr.dtype.name)
    if code is None:
        raise IntegrityError(f"unsupported checkpoint dtype {arr.dtype}")
    return arr.astype(_DTYPES[code], copy=False), code


def save_checkpoint(path, kind, arrays, config=None, deps=None, meta=None):
    """Write atomically; returns the content hash of the array blob."""
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr, code = _canonical(arrays[name])
        raw = arr.tobytes()
        directory[name] = {
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    content_hash = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config or {},
        "deps": deps or {},
        "meta": meta or {},
        "arrays": directory,
        "content_hash": content_hash,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(blob)
    os.replace(tmp, path)
    return content_hash


def load_checkpoint(path):
    """Read and verify; truncation or hash mismatch raises IntegrityError
    before any array is handed out."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 12)
        if len(head) < len(MAGIC) + 12 or head[: len(MAGIC)] != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint file")
        version = struct.unpack_from("<I", head, len(MAGIC))[0]
        if version != FORMAT_VERSION:
            raise MigrationError(
                f"{path}: format version {version} is not supported "
                f"(expected {FORMAT_VERSION})")
        manifest_len = struct.unpack_from("<Q", head, len(MAGIC) + 4)[0]
        payload = fh.read(manifest_len)
        if len(payload) < manifest_len:
            raise IntegrityError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: corrupt manifest") from exc
        blob = fh.read()

    expected = sum(e["length"] for e in manifest["arrays"].values())
    if len(blob) != expected:
        raise IntegrityError(
            f"{path}: array blob has {len(blob)} bytes, expected {expected}")
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["content_hash"]:
        raise IntegrityError(f"{path}: content hash mismatch")

    arrays = {}
    for name, entry in manifest["arrays"].items():
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise IntegrityError(f"{path}: unknown dtype {entry['dtype']!r}")
        raw = blob[entry["offset"]: entry["offset"] + entry["length"]]
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=manifest["kind"], arrays=arrays, config=manifest["config"],
        deps=manifest["deps"], meta=manifest["meta"],
        content_hash=manifest["content_hash"],
    )


def file_content_hash(path):
    """Content hash recorded inside an existing checkpoint file."""
    return load_checkpoint(path).content_hash
