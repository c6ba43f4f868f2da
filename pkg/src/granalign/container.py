"""UCFA v1 binary tensor container.

Layout (little-endian): bytes 0-3 ASCII ``UCFA``, byte 4 version (=1),
byte 5 dtype code (=1, float32 LE), bytes 6-7 reserved zero, u32 tensor
count, then per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32
dims, row-major float32 payload. Reserved tensor names: "frames",
"patches", "words", "sentence", "mask".

Values are stored as float32; pass float32 arrays for bit-exact
round-trips.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"UCFA"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 3

RESERVED_NAMES = ("frames", "patches", "words", "sentence", "mask")


def write_container(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    """Serialize a named-tensor map to *path*.

    Tensors must have rank <= 3 and finite values; they are cast to
    float32 before writing.
    """
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<BBBB", VERSION, DTYPE_F32, 0, 0)
    blob += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype=np.float32)
        if arr.ndim > MAX_RANK:
            raise DataError(f"tensor '{name}' has rank {arr.ndim} > {MAX_RANK}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"tensor '{name}' contains non-finite values")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"tensor name too long ({len(encoded)} bytes)")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    """Cursor over a byte buffer with offset-aware truncation errors."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise DataError(
                f"truncated container at offset {self.off}: "
                f"need {n} bytes for {what}, have {len(self.buf) - self.off}"
            )
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read a UCFA v1 file back into a named-tensor map (float32 arrays).

    Exact inverse of :func:`write_container` for valid files. Malformed
    input raises :class:`DataError` with the failing byte offset.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise DataError("bad magic at offset 0")
    version = r.u8("version")
    if version != VERSION:
        raise DataError(f"unsupported version {version} at offset 4")
    dtype = r.u8("dtype")
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported dtype code {dtype} at offset 5")
    reserved = r.take(2, "reserved bytes")
    if reserved != b"\x00\x00":
        raise DataError("nonzero reserved bytes at offset 6")
    count = r.u32("tensor count")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("name length")
        name_off = r.off
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"invalid UTF-8 tensor name at offset {name_off}") from exc
        if name in tensors:
            raise DataError(f"duplicate tensor name '{name}' at offset {name_off}")
        rank = r.u8(f"rank of '{name}'")
        if rank > MAX_RANK:
            raise DataError(f"tensor '{name}' has rank {rank} > {MAX_RANK} at offset {r.off - 1}")
        dims = tuple(r.u32(f"dim {i} of '{name}'") for i in range(rank))
        n_values = 1
        for dim in dims:
            n_values *= dim
        payload = r.take(4 * n_values, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if not np.all(np.isfinite(arr)):
            raise DataError(f"tensor '{name}' contains non-finite values")
        tensors[name] = arr
    if r.off != len(r.buf):
        raise DataError(f"trailing data at offset {r.off}")
    return tensors
