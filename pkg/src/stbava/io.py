"""Binary tensor container (``.stbt``) and the checkpoint file built on it.

Container layout, all little-endian::

    b"STBT" | version u8 (=1) | dtype u8 | rank u8 | rank x u32 dims | payload

dtype codes: 0 = float32, 1 = uint8, 2 = float64.
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"STBT"
VERSION = 1
MAX_RANK = 4
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}

CKPT_MAGIC = b"STBC"


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    code = CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"dtype: unsupported array dtype {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank: {arr.ndim} exceeds maximum {MAX_RANK}")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("header: truncated before rank field")
    if buf[:4] != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"version: unsupported {version}")
    if code not in DTYPES:
        raise FormatError(f"dtype: unknown code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank: {rank} exceeds maximum {MAX_RANK}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise FormatError("dims: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dt = DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise FormatError(f"payload: expected {need} bytes, found {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=int(np.prod(dims, dtype=np.int64)))
    return arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)


def write_tensor(path, t) -> None:
    data = encode_tensor(t)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Concatenate ``.stbt`` blobs behind a JSON index of name -> [offset, length].

    Layout: b"STBC" | u32 header length | JSON header | blobs. Offsets are
    relative to the first byte after the header.
    """
    blobs = io.BytesIO()
    index = {}
    for name in sorted(tensors):
        b = encode_tensor(tensors[name])
        index[name] = [blobs.tell(), len(b)]
        blobs.write(b)
    header = json.dumps({"meta": meta, "index": index}, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header + blobs.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"magic: expected {CKPT_MAGIC!r}, got {buf[:4]!r}")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8 : 8 + n])
    except ValueError as exc:
        raise FormatError("header: checkpoint index is not valid JSON") from exc
    base = 8 + n
    tensors = {name: decode_tensor(buf[base + o : base + o + ln]) for name, (o, ln) in header["index"].items()}
    return tensors, header["meta"]
