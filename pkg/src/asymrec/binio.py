"""Little-endian binary helpers shared by the AEMB, MHQ1 and AREC formats.

All three formats end with an 8-byte trailer holding the unsigned sum of the
payload bytes.
"""

import hashlib
import struct

import numpy as np

from .errors import FormatError


def byte_sum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))


def with_checksum(payload: bytes) -> bytes:
    return payload + struct.pack("<Q", byte_sum(payload) & 0xFFFFFFFFFFFFFFFF)


def split_checksum(blob: bytes, start: int) -> bytes:
    """Validate the trailer and return ``blob[start:-8]``."""
    if len(blob) < start + 8:
        raise FormatError("file too short for checksum trailer", offset=len(blob))
    payload = blob[start:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if stored != byte_sum(payload):
        raise FormatError("checksum mismatch", offset=len(blob) - 8)
    return payload


class Reader:
    def __init__(self, blob: bytes, pos: int = 0, end: int | None = None):
        self.blob = blob
        self.pos = pos
        self.end = len(blob) if end is None else end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated {what}: need {n} bytes, have {self.end - self.pos}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def f64_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
