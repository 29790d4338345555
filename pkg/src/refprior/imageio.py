"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only.

Images are float arrays in ``[0, 1]``: ``(H, W, 3)`` for colour, ``(H, W)`` for
grey. Loading maps byte ``b`` to ``b / 255``; saving maps ``v`` to
``floor(clip(v, 0, 1) * 255 + 0.5)``. Files are written with the canonical
header ``P6\\n<w> <h>\\n255\\n``, so load -> save reproduces any file in that
form byte for byte.
"""

import os

import numpy as np

from .errors import FormatError, ShapeError

_WHITESPACE = b" \t\n\r\x0b\x0c"


def to_bytes(values):
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _parse(buf, path=None):
    """Return ``(magic, width, height, payload_offset)``."""
    if len(buf) < 2:
        raise FormatError("truncated header: missing magic number", 0, path)
    magic = bytes(buf[:2])
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"bad magic number {magic!r}, expected b'P6' or b'P5'", 0, path)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header", pos, path)
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in header", pos, path)
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append((int(buf[start:pos]), start))
        else:
            raise FormatError(f"unexpected byte {ch!r} in header", pos, path)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("expected a single whitespace byte after maxval", pos, path)
    (width, w_at), (height, h_at), (maxval, m_at) = fields
    if width < 1:
        raise FormatError(f"width must be >= 1, got {width}", w_at, path)
    if height < 1:
        raise FormatError(f"height must be >= 1, got {height}", h_at, path)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", m_at, path)
    return magic, width, height, pos + 1


def decode(buf, path=None):
    """Decode PPM/PGM bytes to ``(magic, uint8 array)``."""
    magic, width, height, offset = _parse(buf, path)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    have = len(buf) - offset
    if have < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, found {have}", offset + max(have, 0), path
        )
    if have > need:
        raise FormatError(f"{have - need} unexpected trailing bytes", offset + need, path)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic, pixels.reshape(shape).copy()


def encode(byte_image):
    byte_image = np.asarray(byte_image, dtype=np.uint8)
    if byte_image.ndim == 3 and byte_image.shape[2] == 3:
        magic = b"P6"
    elif byte_image.ndim == 2:
        magic = b"P5"
    else:
        raise ShapeError(f"cannot encode image of shape {byte_image.shape}")
    h, w = byte_image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + byte_image.tobytes()


def load_bytes(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode(buf, os.fspath(path))[1]


def load_image(path):
    """Load a P6 file as an ``(H, W, 3)`` float64 image."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pixels = decode(buf, os.fspath(path))
    if magic != b"P6":
        raise FormatError("expected a colour P6 image, found P5", 0, os.fspath(path))
    return pixels.astype(np.float64) / 255.0


def load_gray(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pixels = decode(buf, os.fspath(path))
    if magic != b"P5":
        raise FormatError("expected a greyscale P5 image, found P6", 0, os.fspath(path))
    return pixels.astype(np.float64) / 255.0


def _write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_image(image, path):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"save_image expects (H, W, 3), got {image.shape}")
    _write(path, encode(to_bytes(image)))


def save_gray(image, path):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"save_gray expects (H, W), got {image.shape}")
    _write(path, encode(to_bytes(image)))


def save_gray_bytes(byte_image, path):
    _write(path, encode(np.asarray(byte_image, dtype=np.uint8)))


def resize_nearest(image, size):
    """Centre-crop to a square, then nearest-neighbour resample to ``size x size``."""
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    image = image[top:top + side, left:left + side]
    if side == size:
        return image.copy()
    idx = ((2 * np.arange(size) + 1) * side) // (2 * size)
    return image[idx][:, idx]
