"""Bounds-checked little-endian reading shared by the binary file formats."""

from __future__ import annotations

import struct

import numpy as np


class Reader:
    def __init__(self, buf: bytes, error: type[Exception] = ValueError):
        self.buf = buf
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise self.error(f"truncated payload: need {n} bytes at offset {self.pos}, "
                             f"file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, *shape: int) -> np.ndarray:
        count = 1
        for s in shape:
            count *= s
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        if not np.isfinite(arr).all():
            raise self.error("non-finite value in payload")
        return arr

    def at_end(self) -> bool:
        return self.pos == len(self.buf)
