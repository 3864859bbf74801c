"""Little-endian binary helpers shared by the checkpoint formats."""

import struct

import numpy as np

from .errors import FormatError


def pack_u32(buf, *values):
    buf.write(struct.pack(f"<{len(values)}I", *values))


def pack_str(buf, s):
    b = s.encode("utf-8")
    pack_u32(buf, len(b))
    buf.write(b)


def pack_array(buf, name, value):
    pack_str(buf, name)
    pack_u32(buf, value.ndim)
    if value.ndim:
        pack_u32(buf, *value.shape)
    buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


class Reader:
    def __init__(self, data, label="file"):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.label}: truncated", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def str(self):
        return self.take(self.u32()).decode("utf-8")

    def array(self):
        name = self.str()
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return name, data

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.label}: trailing bytes", offset=self.pos)
