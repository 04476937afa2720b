"""Writer for the engine's little-endian feature file format.

Layout: "FRNF" | version u16 = 1 | reserved u16 = 0 | dim u32 |
count u64 | per record: id_len u16 | id UTF-8 | dim * f32.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Sequence

import numpy as np

MAGIC = b"FRNF"
VERSION = 1


def write_frnf(ids: Sequence[str], vectors: np.ndarray, path) -> None:
    """Atomically write id/vector pairs (temp file in place, then rename)."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError(f"need one vector row per id: {vectors.shape} vs {len(ids)}")
    dim = vectors.shape[1] if len(ids) else 0
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".frnf-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<4sHHIQ", MAGIC, VERSION, 0, dim, len(ids)))
            for item_id, row in zip(ids, vectors):
                encoded = item_id.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(row.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
