"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ICMF" | u32 version | u32 section count
    per section: u32 name length | UTF-8 name | u8 dtype tag (1=f32, 2=f64)
                 | u32 rank | rank x u64 dims | u64 offset | u64 length
    payloads, contiguous, in table order
    u64 CRC-64/XZ of every preceding byte
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "FORMAT_VERSION",
    "ContainerError",
    "MalformedContainer",
    "ChecksumMismatch",
    "DuplicateSection",
    "VersionMismatch",
    "crc64",
    "encode_container",
    "decode_container",
    "save_container",
    "load_container",
]

MAGIC = b"ICMF"
FORMAT_VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class ContainerError(Exception):
    pass


class MalformedContainer(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


class DuplicateSection(MalformedContainer):
    pass


class VersionMismatch(MalformedContainer):
    pass


def _make_table() -> list[int]:
    poly = 0xC96C5795D7870F42  # ECMA-182, reflected
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _make_table()
_MASK = 0xFFFFFFFFFFFFFFFF


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ. Pass a previous result as ``crc`` to continue a running checksum."""
    t = _TABLE
    c = crc ^ _MASK
    for b in data:
        c = t[(c ^ b) & 0xFF] ^ (c >> 8)
    return c ^ _MASK


def _items(sections) -> list[tuple[str, np.ndarray]]:
    pairs = list(sections.items()) if isinstance(sections, Mapping) else list(sections)
    seen = set()
    for name, _ in pairs:
        if name in seen:
            raise DuplicateSection(f"duplicate section name {name!r}")
        seen.add(name)
    return pairs


def encode_container(sections: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                     version: int = FORMAT_VERSION) -> bytes:
    pairs = _items(sections)
    arrays = []
    for name, arr in pairs:
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise TypeError(f"section {name!r}: unsupported dtype {arr.dtype}")
        arrays.append((name.encode("utf-8"), np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")))
    table_len = 12 + sum(4 + len(n) + 1 + 4 + 8 * a.ndim + 16 for n, a in arrays)
    head = bytearray(MAGIC + struct.pack("<II", version, len(arrays)))
    offset = table_len
    for n, a in arrays:
        head += struct.pack("<I", len(n)) + n
        head += struct.pack("<BI", _TAG_OF[a.dtype.newbyteorder("=")], a.ndim)
        head += struct.pack(f"<{a.ndim}Q", *a.shape)
        head += struct.pack("<QQ", offset, a.nbytes)
        offset += a.nbytes
    body = bytes(head) + b"".join(a.tobytes() for _, a in arrays)
    return body + struct.pack("<Q", crc64(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise MalformedContainer(f"truncated header at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(buf: bytes, version: int = FORMAT_VERSION) -> dict[str, np.ndarray]:
    if len(buf) < 20:
        raise MalformedContainer(f"file too short ({len(buf)} bytes)")
    end = len(buf) - 8
    r = _Reader(buf, end)
    if r.take(4) != MAGIC:
        raise MalformedContainer("bad magic bytes")
    found, count = r.unpack("<II")
    if found != version:
        raise VersionMismatch(f"container version {found}, expected {version}")
    table = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedContainer("section name is not UTF-8") from exc
        tag, rank = r.unpack("<BI")
        if tag not in _TAGS:
            raise MalformedContainer(f"section {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        offset, length = r.unpack("<QQ")
        table.append((name, _TAGS[tag], dims, offset, length))
    pos = r.pos
    seen = set()
    for name, dt, dims, offset, length in table:
        if name in seen:
            raise DuplicateSection(f"duplicate section name {name!r}")
        seen.add(name)
        if offset != pos or offset + length > end:
            raise MalformedContainer(f"section {name!r}: payload out of bounds")
        if int(np.prod(dims, dtype=np.uint64)) * dt.itemsize != length:
            raise MalformedContainer(f"section {name!r}: length does not match dims")
        pos += length
    if pos != end:
        raise MalformedContainer("trailing bytes after payloads")
    (stored,) = struct.unpack("<Q", buf[end:])
    if crc64(buf[:end]) != stored:
        raise ChecksumMismatch("container checksum mismatch")
    return {name: np.frombuffer(buf, dtype=dt, count=length // dt.itemsize, offset=offset)
            .reshape(dims).astype(dt.newbyteorder("="))
            for name, dt, dims, offset, length in table}


def save_container(sections, path, version: int = FORMAT_VERSION) -> None:
    """Write atomically (temp file then rename)."""
    data = encode_container(sections, version)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_container(path, version: int = FORMAT_VERSION) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_container(fh.read(), version)
