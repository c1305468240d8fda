"""Binary netpbm I/O: grayscale PGM (P5) and color PPM (P6), maxval 255.

Readers accept arbitrary whitespace and '#' comments between header tokens;
writers emit the canonical "P5\\n<w> <h>\\n255\\n" header, so reading a
canonical file and writing it back is byte-identical. Pixels map to [0, 1]
via v / 255 on read and round(v * 255) clamped to 0..255 on write.
"""

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor

BT601 = (0.299, 0.587, 0.114)


def _read_token(blob, pos, path):
    # Skip whitespace and comment lines, then take one run of non-whitespace.
    n = len(blob)
    while pos < n:
        ch = blob[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and blob[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: header ended early", offset=pos)
    start = pos
    while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
        pos += 1
    return blob[start:pos], pos


def read_image(path):
    """Read a PGM/PPM file into a (1, c, h, w) tensor with values in [0, 1];
    c is 1 for PGM and 3 for PPM."""
    with open(path, "rb") as f:
        blob = f.read()
    magic, pos = _read_token(blob, 0, path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: expected binary PGM (P5) or PPM (P6), got {magic!r}", offset=0)
    channels = 1 if magic == b"P5" else 3
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(blob, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: non-numeric {what} {tok!r}", offset=pos) from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    expected = width * height * channels
    raster = blob[pos : pos + expected]
    if len(raster) != expected:
        raise FormatError(
            f"{path}: raster has {len(raster)} bytes, expected {expected}", offset=pos
        )
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float32) / np.float32(255.0)
    if channels == 1:
        arr = arr.reshape(1, 1, height, width)
    else:
        arr = arr.reshape(height, width, 3).transpose(2, 0, 1).reshape(1, 3, height, width)
    return Tensor(np.ascontiguousarray(arr))


def write_image(tensor, path):
    """Write a (1, 1, h, w) tensor as PGM or a (1, 3, h, w) tensor as PPM."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] not in (1, 3):
        raise ShapeError(f"write_image needs (1, 1|3, h, w), got {data.shape}")
    _, c, h, w = data.shape
    quantized = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    if c == 1:
        raster = quantized.reshape(h, w).tobytes()
    else:
        raster = quantized.reshape(3, h, w).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(header + raster)


def to_grayscale(image):
    """Collapse a (1, c, h, w) image tensor to one channel; RGB uses the
    BT.601 luma weights."""
    data = image.data
    if data.shape[1] == 1:
        return image
    if data.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {data.shape[1]}")
    r, g, b = data[0, 0], data[0, 1], data[0, 2]
    luma = BT601[0] * r + BT601[1] * g + BT601[2] * b
    return Tensor(luma[None, None].astype(data.dtype))
