"""Binary container primitives shared by checkpoints and code indices.

Every file starts with the 4-byte magic ``FDCH``, a little-endian uint16
format version and a uint8 kind tag (1 = model checkpoint, 2 = code index).
All integers and floats that follow are little-endian.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FDCH"
VERSION = 1
KIND_MODEL = 1
KIND_INDEX = 2

_KIND_NAMES = {KIND_MODEL: "model checkpoint", KIND_INDEX: "code index"}


class Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self):
        return self.unpack("B")[0]

    def u16(self):
        return self.unpack("H")[0]

    def u32(self):
        return self.unpack("I")[0]

    def u64(self):
        return self.unpack("Q")[0]

    def array(self, dtype, count):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count).astype(
            np.dtype(dtype).newbyteorder("=")
        )

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after end of data")


def header(kind):
    return MAGIC + struct.pack("<HB", VERSION, kind)


def read_header(reader, kind):
    what = _KIND_NAMES[kind]
    if len(reader.buf) < len(MAGIC) or bytes(reader.buf[:4]) != MAGIC:
        raise FormatError(f"not a {what} file (bad magic)")
    reader.take(4)
    version, got = reader.unpack("HB")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    if got != kind:
        raise FormatError(f"not a {what} file (found a {_KIND_NAMES.get(got, 'unknown')} file)")


def le_bytes(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
