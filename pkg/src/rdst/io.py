"""Raw tensor records ("RDT1") and the named-tensor checkpoint container."""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"RDT1"
CKPT_MAGIC = b"RDCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64 are stored")
    head = MAGIC + struct.pack("<II", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack_from("<II", buf, offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 12
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + n * dt.itemsize
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
    return arr, end


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(encode_tensor(arr))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    arr, end = decode_tensor(Path(path).read_bytes())
    return arr


def save_checkpoint(path, arrays, meta: dict | None = None) -> None:
    """Write a manifest (key = value lines plus a tensor directory) then the records."""
    payload = bytearray()
    directory = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise FormatError(f"tensor name {name!r} contains whitespace")
        rec = encode_tensor(arr)
        directory.append(f"tensor {name} {len(payload)} {len(rec)}")
        payload += rec
    lines = [f"format_version = {CKPT_VERSION}"]
    for k, v in (meta or {}).items():
        if k != "format_version":  # owned by the writer
            lines.append(f"{k} = {v}")
    lines += directory
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    header = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(manifest))
    Path(path).write_bytes(header + manifest + bytes(payload))


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 16
    manifest = buf[start:start + mlen].decode("utf-8")
    base = start + mlen
    meta: dict[str, str] = {}
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for line in manifest.splitlines():
        if line.startswith("tensor "):
            _, name, off, length = line.split()
            arr, end = decode_tensor(buf, base + int(off))
            if end != base + int(off) + int(length):
                raise FormatError(f"tensor {name} length mismatch")
            arrays[name] = arr
        elif "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
