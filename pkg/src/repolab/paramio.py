"""Versioned binary container for policy parameters.

Layout (little-endian)::

    b"RPLP" | u16 version | u32 header length | JSON header | float64 payload | sha256 digest

The header records kind, vocab/class sizes and ``[name, shape]`` for each
array in payload order; the digest covers every preceding byte.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .policy import PolicyParams

MAGIC = b"RPLP"
VERSION = 1


def dumps_params(policy: PolicyParams) -> bytes:
    names = sorted(policy.arrays)
    header = json.dumps({
        "kind": policy.kind,
        "vocab_size": policy.vocab_size,
        "class_count": policy.class_count,
        "arrays": [[k, list(policy.arrays[k].shape)] for k in names],
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", VERSION, len(header)) + header
    body += b"".join(np.ascontiguousarray(policy.arrays[k], dtype="<f8").tobytes() for k in names)
    return body + hashlib.sha256(body).digest()


def loads_params(blob: bytes) -> PolicyParams:
    if len(blob) < 10 + 32 or blob[:4] != MAGIC:
        raise ParseError("not a parameter file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ParseError("parameter file checksum mismatch")
    version, hlen = struct.unpack("<HI", body[4:10])
    if version != VERSION:
        raise ParseError(f"unsupported parameter file version {version}")
    header = json.loads(body[10:10 + hlen])
    offset = 10 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        chunk = body[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ParseError(f"truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(body):
        raise ParseError("trailing bytes after payload")
    return PolicyParams(header["kind"], header["vocab_size"], header["class_count"], arrays)


def save_params(path, policy: PolicyParams):
    Path(path).write_bytes(dumps_params(policy))


def load_params(path) -> PolicyParams:
    return loads_params(Path(path).read_bytes())
