"""OSPT tensor container: a text manifest followed by self-describing blobs.

File layout:

    OSPT-CONTAINER 1
    meta <key> <value>            (zero or more)
    tensor <name> <dtype> <rank> <d0> ... <crc32hex>
    ...
    end
    <blob bytes, concatenated in manifest order>

Each blob starts with magic ``OSPT``, a u32 format version, a u32 dtype
code, a u32 rank, then `rank` u32 extents, then the little-endian
row-major payload. The manifest CRC32 covers only the payload bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import (
    ContainerChecksumError,
    ContainerError,
    ContainerTruncatedError,
    ContainerVersionError,
    DataError,
)

MAGIC = b"OSPT"
VERSION = 1

_DTYPES = {
    "f64": (0, np.dtype("<f8")),
    "f32": (1, np.dtype("<f4")),
    "u8": (2, np.dtype("<u1")),
    "u32": (3, np.dtype("<u4")),
}
_CODE_TO_NAME = {code: name for name, (code, _) in _DTYPES.items()}


def _dtype_name(arr: np.ndarray) -> str:
    for name, (_, dt) in _DTYPES.items():
        if arr.dtype == dt:
            return name
    raise DataError(f"unsupported container dtype {arr.dtype}; use f64, f32, u8 or u32")


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write named arrays to one container file.

    Tensor names must have no whitespace. Arrays are converted to C order;
    bool arrays are stored as u8.
    """
    entries = []
    blobs = []
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise DataError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        dname = _dtype_name(np.ascontiguousarray(arr))
        code, dt = _DTYPES[dname]
        payload = np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()
        header = struct.pack("<4sIII", MAGIC, VERSION, code, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        dims = " ".join(str(d) for d in arr.shape)
        entries.append(f"tensor {name} {dname} {arr.ndim} {dims} {crc:08x}".replace("  ", " "))
        blobs.append(header + payload)
    lines = [f"OSPT-CONTAINER {VERSION}"]
    for k, v in (meta or {}).items():
        if any(ch.isspace() for ch in str(k)):
            raise DataError(f"meta key {k!r} contains whitespace")
        lines.append(f"meta {k} {v}")
    lines.extend(entries)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path, with_meta: bool = False):
    """Read a container back into {name: ndarray}; verifies every blob."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContainerError(f"{path}: not a container file")
    head = raw[:nl].decode("utf-8", "replace").split()
    if head[:1] != ["OSPT-CONTAINER"]:
        raise ContainerError(f"{path}: bad container magic line")
    if head[1:] != [str(VERSION)]:
        raise ContainerVersionError(f"{path}: unsupported container version {head[1:]}")
    pos = nl + 1
    manifest = []
    meta = {}
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ContainerTruncatedError(f"{path}: manifest has no 'end' line")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        parts = line.split()
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            continue
        if parts[0] != "tensor":
            raise ContainerError(f"{path}: unrecognized manifest line {line!r}")
        name, dname, rank = parts[1], parts[2], int(parts[3])
        dims = tuple(int(d) for d in parts[4 : 4 + rank])
        crc = int(parts[4 + rank], 16)
        manifest.append((name, dname, rank, dims, crc))

    out = {}
    for name, dname, rank, dims, crc in manifest:
        hdr_len = 16 + 4 * rank
        if pos + hdr_len > len(raw):
            raise ContainerTruncatedError(f"{path}: blob header for {name} truncated")
        magic, version, code, brank = struct.unpack_from("<4sIII", raw, pos)
        if magic != MAGIC:
            raise ContainerError(f"{path}: blob {name} has bad magic")
        if version != VERSION:
            raise ContainerVersionError(f"{path}: blob {name} has version {version}")
        if code not in _CODE_TO_NAME or _CODE_TO_NAME[code] != dname or brank != rank:
            raise ContainerError(f"{path}: blob {name} disagrees with manifest")
        bdims = struct.unpack_from(f"<{rank}I", raw, pos + 16)
        if tuple(bdims) != dims:
            raise ContainerError(f"{path}: blob {name} extents disagree with manifest")
        pos += hdr_len
        dt = _DTYPES[dname][1]
        count = 1
        for d in dims:
            count *= d
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise ContainerTruncatedError(f"{path}: payload of {name} truncated")
        payload = raw[pos : pos + nbytes]
        pos += nbytes
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise ContainerChecksumError(f"{path}: checksum mismatch for tensor {name}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if with_meta:
        return out, meta
    return out
