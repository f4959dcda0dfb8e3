"""Model container shared by DeepMDS, the DAE encoder, PCA and Isomap.

Layout: ``b"MIDM"``, ``u32`` version, ``u64`` header length, UTF-8 JSON
header, then every parameter array as little-endian float32 in the order
listed under ``header["arrays"]`` (stage-major, layer-major for networks).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import FeatureFormatError
from .features import _atomic_write

MAGIC = b"MIDM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def as_stored(a) -> np.ndarray:
    """Round to the values a model file can hold (float32), kept as float64.

    Fitted parameters pass through this so a reloaded model reproduces the
    in-memory one bit for bit.
    """
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def encode_model(header: dict, arrays: List[np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [list(np.shape(a)) for a in arrays]
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + blob


def decode_model(raw: bytes) -> Tuple[dict, List[np.ndarray]]:
    if len(raw) < _PREFIX.size:
        raise FeatureFormatError("truncated model file")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise FeatureFormatError(f"not a model file (magic {magic!r}, version {version})")
    start = _PREFIX.size
    header = json.loads(raw[start : start + hlen].decode())
    offset = start + hlen
    arrays = []
    for shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append(a.astype(np.float64))
        offset += 4 * count
    if offset != len(raw):
        raise FeatureFormatError(f"model blob has {len(raw) - offset} trailing bytes")
    return header, arrays


def save_model(path, header: dict, arrays: List[np.ndarray]):
    _atomic_write(Path(path), encode_model(header, arrays))


def load_model(path) -> Tuple[dict, List[np.ndarray]]:
    return decode_model(Path(path).read_bytes())
