"""Binary checkpoint container.

Layout::

    8 bytes   magic b"GSCKPT1\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length H, uint64 little-endian
    H bytes   UTF-8 JSON header {"entries": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    payload   raw little-endian arrays, offsets relative to the payload start
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSCKPT1\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays atomically (temporary file, then rename)."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix ({len(raw)} bytes, need {_PREFIX.size}) at offset 0")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 8 (expected {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: header runs past end of file at offset {start} (length {hlen})")
    try:
        header = json.loads(raw[start:start + hlen].decode())
        entries = header["entries"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {start}: {exc}") from None
    base = start + hlen
    payload = len(raw) - base
    arrays = {}
    end_prev = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        dtype = _DTYPES.get(e.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: entry {e.get('name')!r} has unknown dtype at offset {start}")
        off, nbytes = int(e["offset"]), int(e["nbytes"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if nbytes != count * dtype.itemsize:
            raise CheckpointError(f"{path}: entry {e['name']!r} size mismatch at offset {base + off}")
        if off < end_prev:
            raise CheckpointError(f"{path}: entry {e['name']!r} overlaps the previous one at offset {base + off}")
        if off + nbytes > payload:
            raise CheckpointError(f"{path}: truncated payload, entry {e['name']!r} needs bytes up to offset "
                                  f"{base + off + nbytes} but file ends at {len(raw)}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=base + off).reshape(e["shape"]).copy()
        end_prev = off + nbytes
    return arrays, header.get("meta", {})


def save_checkpoint(module, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = dict(module.state_dict()) if module is not None else {}
    for k, v in (extra or {}).items():
        arrays[k] = v
    save_arrays(path, arrays, meta)


def load_checkpoint(module, path) -> dict:
    """Load state into ``module`` (bit-exact); returns the metadata."""
    arrays, meta = load_arrays(path)
    module.load_state_dict(arrays)
    return meta


def prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
