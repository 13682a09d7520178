"""Self-describing binary container shared by dataset, embedding and checkpoint files.

Layout::

    magic          8 bytes ASCII ("MCALAB01" or "MCACKPT1")
    header_len     uint32 little-endian
    header         UTF-8 JSON: {"meta": ..., "arrays": [{name, dtype, shape, offset}, ...]}
    arrays         little-endian payload, manifest order; offsets relative to payload start
    crc32          uint32 little-endian over header_len + header + arrays

Only ``f4`` (float32) and ``i4`` (int32) arrays are stored.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        kind = "f4" if np.issubdtype(arr.dtype, np.floating) else "i4"
        data = np.ascontiguousarray(arr, dtype=DTYPES[kind]).tobytes()
        manifest.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = _canonical_json({"meta": meta, "arrays": manifest})
    body = struct.pack("<I", len(header)) + header + b"".join(chunks)
    return magic + body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12 or blob[:8] != magic:
        raise FormatError(f"bad magic: expected {magic.decode()!r}, got {blob[:8]!r}", 0)
    (hlen,) = struct.unpack_from("<I", blob, 8)
    hstart = 12
    if hstart + hlen > len(blob):
        raise FormatError(f"header of {hlen} bytes runs past end of file", hstart)
    try:
        header = json.loads(blob[hstart : hstart + hlen].decode("utf-8"))
        meta, manifest = header["meta"], header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}", hstart) from None
    pstart = hstart + hlen
    arrays = {}
    end = pstart
    for entry in manifest:
        try:
            name, kind, shape, off = entry["name"], entry["dtype"], entry["shape"], entry["offset"]
            dtype = DTYPES[kind]
        except (KeyError, TypeError):
            raise FormatError(f"malformed manifest entry {entry!r}", hstart) from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = pstart + off
        if start + nbytes > len(blob) - 4:
            raise FormatError(f"array {name!r} truncated: needs {nbytes} bytes", start)
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape).copy()
        end = max(end, start + nbytes)
    if end + 4 != len(blob):
        raise FormatError(f"expected checksum at end of payload, file has {len(blob) - end} trailing bytes", end)
    (stored,) = struct.unpack_from("<I", blob, end)
    actual = zlib.crc32(blob[8:end])
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:08x}, computed {actual:08x}", end)
    return meta, arrays


def write_bytes(path, blob: bytes) -> None:
    """Atomic write: temp file then rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def write(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blob = encode(magic, meta, arrays)
    write_bytes(path, blob)
    return blob


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
