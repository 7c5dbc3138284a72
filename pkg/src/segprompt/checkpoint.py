"""Portable binary tensor checkpoints.

One tensor record is little-endian: magic ``SPTN``, u32 version, u32 rank,
rank u64 dims, then the float64 payload in row-major order. A whole-model
checkpoint prefixes the records with a named-tensor manifest (magic ``SPTM``,
u32 version, u32 entry count, then per entry u32 name length, utf-8 name,
u64 absolute record offset). Extra run metadata is a plain-text key=value
block in a ``.meta`` sidecar next to the checkpoint.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

TENSOR_MAGIC = b"SPTN"
MANIFEST_MAGIC = b"SPTM"
FORMAT_VERSION = 1


def tensor_record(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8").tobytes()
    return head + dims + payload


def read_tensor_record(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record, returning the array and the offset just past it."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ConfigurationError(f"bad tensor record magic at offset {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported tensor record version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float64), pos + 8 * count


def save_checkpoint(path: str | Path, named: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    """Write named tensors plus an optional key=value meta sidecar."""
    names = list(named.keys())
    records = [tensor_record(named[n]) for n in names]
    entries = b""
    header_len = len(MANIFEST_MAGIC) + 8  # magic + version + count
    encoded = [n.encode("utf-8") for n in names]
    manifest_len = header_len + sum(4 + len(e) + 8 for e in encoded)
    offset = manifest_len
    for enc, rec in zip(encoded, records):
        entries += struct.pack("<I", len(enc)) + enc + struct.pack("<Q", offset)
        offset += len(rec)
    blob = MANIFEST_MAGIC + struct.pack("<II", FORMAT_VERSION, len(names)) + entries
    blob += b"".join(records)
    path = Path(path)
    path.write_bytes(blob)
    if meta is not None:
        lines = [f"{k}={v}" for k, v in meta.items()]
        path.with_suffix(path.suffix + ".meta").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read back (named tensors, meta). Meta is {} when no sidecar exists."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MANIFEST_MAGIC:
        raise ConfigurationError(f"{path}: not a named-tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    offsets: list[tuple[str, int]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        offsets.append((name, off))
    named = {}
    for name, off in offsets:
        arr, _ = read_tensor_record(buf, off)
        named[name] = arr
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta: dict[str, str] = {}
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    return named, meta


def checkpoint_bytes(named: dict[str, np.ndarray]) -> bytes:
    """Serialize to bytes without touching disk, for byte-identity checks."""
    blob = b""
    for name in named:
        blob += name.encode("utf-8") + b"\x00" + tensor_record(named[name])
    return blob
