"""Seeded random streams.

All randomness goes through numpy's Philox4x64 counter-based generator.
A stream is identified by the run seed plus a tuple of labels (for example
``("init", "prrn")`` or ``("sample", 17)``); the Philox key is the first 128
bits of ``sha256("<seed>/<label>/<label>...")``. Philox output for a fixed key
is specified bit-for-bit, so streams are stable across platforms.
"""

import hashlib

import numpy as np


def stream_key(seed, *labels):
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed, *labels):
    """Return an independent ``np.random.Generator`` for ``(seed, *labels)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
