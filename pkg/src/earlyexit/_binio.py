"""Little-endian binary container primitives with CRC32 trailers.

Shared by the router-bank checkpoint format and the optional model weight
dumps. Every container is: magic, version, metadata, payload, then a CRC32
of all preceding bytes. Loaders fail with a distinct error per corruption
mode instead of returning garbage.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class BinaryFormatError(Exception):
    """Base class for malformed container files."""


class BadMagicError(BinaryFormatError):
    pass


class VersionError(BinaryFormatError):
    pass


class TruncatedError(BinaryFormatError):
    pass


class ChecksumError(BinaryFormatError):
    pass


class DimensionError(BinaryFormatError):
    pass


class Writer:
    def __init__(self, magic: bytes):
        if len(magic) != 4:
            raise ValueError("magic must be exactly 4 bytes")
        self._buf = bytearray(magic)

    def u32(self, value: int) -> None:
        self._buf += struct.pack("<I", value)

    def u64(self, value: int) -> None:
        self._buf += struct.pack("<Q", value)

    def f32(self, value: float) -> None:
        self._buf += struct.pack("<f", value)

    def array_f32(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        self._buf += arr.astype("<f4", copy=False).tobytes()

    def finish(self) -> bytes:
        """Append the CRC32 trailer and return the full byte string."""
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        return bytes(self._buf) + struct.pack("<I", crc)


class Reader:
    """Bounds-checked reader over a full container byte string.

    The final 4 bytes are the CRC trailer; payload reads never touch them.
    """

    def __init__(self, data: bytes):
        if len(data) < 8:
            raise TruncatedError(f"container holds {len(data)} bytes, too short for any header")
        self._data = data
        self._pos = 0
        self._limit = len(data) - 4

    def _take(self, n: int) -> bytes:
        if self._pos + n > self._limit:
            raise TruncatedError(
                f"needed {n} bytes at offset {self._pos}, only {self._limit - self._pos} before trailer"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def expect_magic(self, magic: bytes) -> None:
        got = self._take(4)
        if got != magic:
            raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def array_f32(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def check_size(self, expected_total: int) -> None:
        """Compare the real file size against what the metadata implies."""
        actual = len(self._data)
        if actual < expected_total:
            raise TruncatedError(f"file holds {actual} bytes, metadata implies {expected_total}")
        if actual > expected_total:
            raise DimensionError(
                f"file holds {actual} bytes but metadata implies {expected_total}; trailing data"
            )

    def verify_crc(self) -> None:
        stored = struct.unpack("<I", self._data[-4:])[0]
        computed = zlib.crc32(self._data[:-4]) & 0xFFFFFFFF
        if stored != computed:
            raise ChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {computed:#010x}")
