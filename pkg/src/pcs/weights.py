"""Binary ".pcsw" weight files.

Layout: magic "PCSW", u32 LE version (currently 1), u32 LE tensor count,
then per tensor: u8 name length, UTF-8 name, u8 ndim, ndim u32 LE dims,
dim-product float32 LE values in row-major order. No padding anywhere.

A checkpoint may append one trailer record after the counted tensors:
u8 name length (12), "__trainstate", u64 LE iteration, 16 opaque bytes of
RNG state. Plain weight files have no trailer.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"PCSW"
VERSION = 1
TRAINSTATE_NAME = b"__trainstate"


def write_pcsw(path, tensors, trainstate=None):
    """Write named arrays in iteration order. ``trainstate`` is an optional
    (iteration, rng_bytes16) pair appended as the trailer record."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if not 1 <= len(raw) <= 255:
                raise FormatError(f"tensor name {name!r} must encode to 1..255 bytes")
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            if arr.ndim > 255:
                raise FormatError(f"tensor {name!r} has too many dims")
            f.write(struct.pack("<B", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        if trainstate is not None:
            iteration, rng_bytes = trainstate
            if len(rng_bytes) != 16:
                raise FormatError("trainstate rng state must be exactly 16 bytes")
            f.write(struct.pack("<B", len(TRAINSTATE_NAME)))
            f.write(TRAINSTATE_NAME)
            f.write(struct.pack("<Q", iteration))
            f.write(rng_bytes)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_pcsw(path):
    """Read a ".pcsw" file. Returns (tensors, trainstate) where ``tensors``
    maps names to float32 arrays in file order and ``trainstate`` is an
    (iteration, rng_bytes16) pair or None."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, str(path))
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a PCSW file", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<B", "name length")
        if name_len == 0:
            raise FormatError(f"{path}: empty tensor name", offset=r.pos - 1)
        name = r.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims") if ndim else ()
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(4 * size, f"values of {name!r}")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}", offset=r.pos)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    trainstate = None
    if r.pos < len(blob):
        (name_len,) = r.unpack("<B", "trailer name length")
        name = r.take(name_len, "trailer name")
        if name != TRAINSTATE_NAME:
            raise FormatError(f"{path}: unexpected trailer record {name!r}", offset=r.pos - name_len)
        (iteration,) = r.unpack("<Q", "trainstate iteration")
        rng_bytes = bytes(r.take(16, "trainstate rng state"))
        trainstate = (iteration, rng_bytes)
    if r.pos != len(blob):
        raise FormatError(f"{path}: trailing garbage after records", offset=r.pos)
    return tensors, trainstate
