"""Checkpoint archive: a JSON manifest followed by raw little-endian buffers.

Layout::

    b"MSCKPT01" | uint64 LE manifest length | manifest JSON (utf-8) | buffers

Each manifest entry records name, shape, dtype, byte offset and length
relative to the start of the buffer region.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MSCKPT01"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u8": "|u1", "bool": "|b1"}


def _dtype_key(dt: np.dtype) -> str | None:
    for k, v in _DTYPES.items():
        ref = np.dtype(v)
        if ref.kind == dt.kind and ref.itemsize == dt.itemsize:
            return k
    return None


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class CheckpointManifest:
    stage: str
    arch_hash: str
    entries: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def arch_hash(description) -> str:
    """Stable short hash of a JSON-serialisable architecture description."""
    blob = json.dumps(description, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], stage: str, arch: str,
         metadata: dict | None = None) -> CheckpointManifest:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = _dtype_key(arr.dtype)
        if key is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset,
                        "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = CheckpointManifest(stage=stage, arch_hash=arch, entries=entries, metadata=metadata or {})
    head = json.dumps({"stage": stage, "arch_hash": arch, "entries": entries, "metadata": manifest.metadata},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    return manifest


def read_manifest(path: str | os.PathLike) -> CheckpointManifest:
    with open(path, "rb") as fh:
        return _read_head(fh)[0]


def _read_head(fh):
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a checkpoint archive")
    (n,) = struct.unpack("<Q", fh.read(8))
    head = json.loads(fh.read(n).decode())
    return CheckpointManifest(head["stage"], head["arch_hash"], head["entries"], head["metadata"]), 16 + n


def load(path: str | os.PathLike, expect_arch: str | None = None) -> tuple[dict[str, np.ndarray], CheckpointManifest]:
    with open(path, "rb") as fh:
        manifest, start = _read_head(fh)
        blob = fh.read()
    if expect_arch is not None and manifest.arch_hash != expect_arch:
        raise ArchitectureMismatch(f"checkpoint arch {manifest.arch_hash} != expected {expect_arch}")
    out = {}
    for e in manifest.entries:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out, manifest
