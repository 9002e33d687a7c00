"""Little-endian binary helpers shared by every on-disk format."""
from __future__ import annotations

import io
import struct

import numpy as np


class Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def tell(self) -> int:
        return self.buf.tell()

    def raw(self, b: bytes) -> None:
        self.buf.write(b)

    def u8(self, v: int) -> None:
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.buf.write(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.buf.write(struct.pack("<Q", v))

    def f32(self, v: float) -> None:
        self.buf.write(struct.pack("<f", v))

    def f64(self, v: float) -> None:
        self.buf.write(struct.pack("<d", v))

    def text(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u32(len(data))
        self.buf.write(data)

    def array(self, a: np.ndarray) -> None:
        self.buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ValueError(f"unexpected end of data at offset {self.pos} (need {n} bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        return bytes(self._take(n)).decode("utf-8")

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self._take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def read_array_at(f, offset: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    f.seek(offset)
    data = f.read(4 * n)
    if len(data) != 4 * n:
        raise OSError(f"short read at offset {offset}")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
