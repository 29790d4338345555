"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RPRN"                       magic
    u32   format_version          currently 1
    u64   config length, then UTF-8 JSON config text
    u32   tensor count
    per tensor:
      u32   name length, then UTF-8 name
      u8    dtype code (1 = float32, 2 = float64)
      u32   rank
      u64 * rank   dims
      raw little-endian values, row-major

The loader rejects unknown versions and dtype codes, truncation, and trailing
bytes, reporting the byte offset of the problem.
"""

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError

MAGIC = b"RPRN"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_checkpoint(config, tensors):
    text = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(text)), text]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint while reading {what} ({n} bytes needed, "
                f"{len(self.buf) - self.pos} left)",
                self.pos,
                self.path,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf, path=None):
    """Return ``(config dict, OrderedDict name -> ndarray)``."""
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", 0, path)
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}", 4, path)
    (length,) = r.unpack("<Q", "config length")
    at = r.pos
    try:
        config = json.loads(r.take(length, "config text").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config text is not valid UTF-8 JSON ({exc})", at, path) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        at = r.pos
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", at, path) from exc
        at = r.pos
        code, rank = r.unpack("<BI", f"header of {name}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", at, path)
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"values of {name}"), dtype=dtype)
        tensors[name] = data.reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes", r.pos, path)
    return config, tensors


def save_checkpoint(path, config, tensors):
    data = encode_checkpoint(config, tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FormatError("checkpoint file not found", None, path)
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)
