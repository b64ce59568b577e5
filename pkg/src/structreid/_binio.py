from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

from .errors import ParseError


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Little-endian cursor over a bytes buffer that raises ParseError on truncation."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated {self.what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        vals = struct.unpack("<" + fmt, self.take(size))
        return vals[0] if len(vals) == 1 else vals

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise ParseError(f"bad magic in {self.what}: {got!r} (expected {expected!r})")

    def string(self) -> str:
        n = self.unpack("I")
        return self.take(n).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ParseError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}")


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw
