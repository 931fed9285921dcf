"""MSFE binary writer.

Little-endian layout: magic "MSFE", u32 version, u32 sentence count, u32
dimension; then per sentence a u32 id length, the UTF-8 id bytes, a u32 row
count n, and n*dim float32 values row-major. Sentences are written in the
mapping's iteration order.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"MSFE"
VERSION = 1


class NonFiniteEmbeddingError(ValueError):
    """NaN or Inf in the vectors to be written."""


def write_msfe(path: str, embeddings: dict[str, np.ndarray]) -> None:
    """Write embeddings atomically (temp file in the target dir + rename).

    Every value must be a 2-d array; all arrays must share one column count.
    Values are stored as little-endian float32 regardless of input dtype.
    """
    if not embeddings:
        raise ValueError("nothing to write: empty embedding mapping")
    arrays = {sid: np.ascontiguousarray(np.asarray(v), dtype="<f4") for sid, v in embeddings.items()}
    dims = {a.shape[1] for a in arrays.values() if a.ndim == 2}
    if any(a.ndim != 2 for a in arrays.values()) or len(dims) != 1:
        raise ValueError("embeddings must be 2-d arrays sharing one dimension")
    (dim,) = dims
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<III", VERSION, len(arrays), dim))
            for sid, arr in arrays.items():
                if not np.isfinite(arr).all():
                    raise NonFiniteEmbeddingError(f"non-finite values in embeddings for '{sid}'")
                sid_b = sid.encode("utf-8")
                f.write(struct.pack("<I", len(sid_b)))
                f.write(sid_b)
                f.write(struct.pack("<I", arr.shape[0]))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
