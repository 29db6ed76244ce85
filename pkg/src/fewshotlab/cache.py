"""Embedding cache file: magic "FSEB", little-endian header and payload.

Layout: 4-byte magic, u32 version, u64 row count, u32 feature dim, then the
feature block (row-major float32) followed by the class-id block (int32).
"""

import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError

MAGIC = b"FSEB"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def write_embedding_cache(path, features, class_ids):
    """Atomically write float32 features [N, D] and int32 class ids [N]."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    ids = np.ascontiguousarray(class_ids, dtype="<i4")
    if feats.ndim != 2 or len(feats) != len(ids):
        raise ConfigError(f"features {feats.shape} vs class ids {ids.shape}")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, feats.shape[0], feats.shape[1]))
            f.write(feats.tobytes())
            f.write(ids.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_embedding_cache(path):
    """(features float32 [N, D], class_ids int32 [N]) from a cache file."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ConfigError(f"{path}: truncated header")
        magic, version, n, dim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        feats = np.frombuffer(f.read(n * dim * 4), dtype="<f4").reshape(n, dim)
        ids = np.frombuffer(f.read(n * 4), dtype="<i4")
        if len(ids) != n:
            raise ConfigError(f"{path}: truncated payload")
    return feats.copy(), ids.copy()
