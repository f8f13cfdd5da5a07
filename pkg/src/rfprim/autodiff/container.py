"""Versioned binary container for network parameters.

Layout (all integers little-endian)::

    b"RFSC" | u16 version | u32 header length | header (UTF-8 JSON)
    | payload: float64 LE arrays back to back | u32 CRC-32 of everything before

The header lists entries; each entry carries an id, free-form metadata and
``arrays``: ``[name, shape, offset]`` triples indexing into the payload (offset
counted in float64 elements).  JSON is written with sorted keys so a
save/load/save cycle is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RFSC"
VERSION = 1


class ContainerError(ValueError):
    pass


def encode(entries: list[dict]) -> bytes:
    """``entries``: dicts with ``id``, ``meta`` (JSON-able) and ``arrays`` (name -> ndarray)."""
    header_entries = []
    chunks = []
    offset = 0
    for e in entries:
        arrs = []
        for name, a in e["arrays"].items():
            a = np.ascontiguousarray(a, dtype="<f8")
            arrs.append([name, list(a.shape), offset])
            chunks.append(a.tobytes())
            offset += a.size
        header_entries.append({"id": e["id"], "meta": e.get("meta", {}), "arrays": arrs})
    header = json.dumps({"entries": header_entries, "n_floats": offset},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> list[dict]:
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise ContainerError("not an RFSC container (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("checksum mismatch (file truncated or corrupted)")
    version, hlen = struct.unpack("<HI", body[4:10])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    header = json.loads(body[10:10 + hlen].decode())
    payload = np.frombuffer(body[10 + hlen:], dtype="<f8")
    if payload.size != header["n_floats"]:
        raise ContainerError("payload size does not match header")
    out = []
    for e in header["entries"]:
        arrays = {}
        for name, shape, off in e["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = payload[off:off + n].reshape(shape).astype(float)
        out.append({"id": e["id"], "meta": e["meta"], "arrays": arrays})
    return out


def write(path, entries: list[dict]) -> None:
    Path(path).write_bytes(encode(entries))


def read(path) -> list[dict]:
    return decode(Path(path).read_bytes())
