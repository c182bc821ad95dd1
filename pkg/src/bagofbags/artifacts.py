"""Binary artifact containers shared by the pipeline stages.

Every on-disk artifact starts with a 4-byte magic, a little-endian u32
format version, and (except distance matrices, whose layout is fixed) a
u32-length-prefixed UTF-8 JSON header followed by raw array data.  Headers
carry ``config_hash`` / ``input_hash`` entries so artifacts are
content-addressable by the configuration and inputs that produced them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import BinaryIO

import numpy as np

FORMAT_VERSION = 1

MAGIC_CHECKPOINT = b"BOBE"
MAGIC_VOCAB = b"BOBV"
MAGIC_CODEBOOK = b"BOBC"
MAGIC_DISTANCES = b"BOBD"
MAGIC_PATCHES = b"BOBP"
MAGIC_EMBEDDINGS = b"BOBX"
MAGIC_HISTOGRAMS = b"BOBH"


class ArtifactError(ValueError):
    """Raised when an artifact file is malformed or has the wrong type."""


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def data_hash(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()[:16]


def write_header(fh: BinaryIO, magic: bytes, header: dict, version: int = FORMAT_VERSION) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<I", version))
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def read_header(fh: BinaryIO, magic: bytes) -> tuple[int, dict]:
    got = fh.read(4)
    if got != magic:
        raise ArtifactError(f"bad magic {got!r}, expected {magic!r}")
    version = struct.unpack("<I", fh.read(4))[0]
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    return version, header


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(fh: BinaryIO, shape: tuple[int, ...], dtype: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    dt = np.dtype(dtype).newbyteorder("<")
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ArtifactError("truncated array data")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dtype)


def write_string_table(fh: BinaryIO, strings: list[str]) -> None:
    for s in strings:
        raw = s.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def read_string_table(fh: BinaryIO, count: int) -> list[str]:
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        out.append(fh.read(n).decode("utf-8"))
    return out
