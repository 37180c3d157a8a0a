"""Binary checkpoint format shared by every model in the package.

Layout (all integers little-endian):

    magic   5 bytes  b"CORA1"
    version u32      currently 1
    records until EOF, each:
        name_len u32, name utf-8 bytes
        rank     u32
        extents  rank x u64
        payload  prod(extents) x f64 (little-endian, row-major)

Round-trips are bit-exact; ``checksum_params`` hashes the same byte stream
and is how the freeze contract on CF embeddings and LM weights is enforced.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"CORA1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _coerce(named) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, value in named.items() if isinstance(named, dict) else named:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        # ascontiguousarray promotes rank-0 to rank-1; keep the true shape
        cont = np.ascontiguousarray(arr, dtype=np.float64).reshape(np.shape(arr))
        out.append((name, cont))
    return out


def _encode(named) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in _coerce(named):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.astype("<f8", copy=False).tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(path, named) -> None:
    """Write named tensors (dict or (name, tensor) pairs) to ``path``."""
    Path(path).write_bytes(_encode(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as an ordered name -> float64 array dict."""
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}")
    (version,) = struct.unpack_from("<I", blob, 5)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(extents)
        pos += 8 * count
        out[name] = arr.astype(np.float64).reshape(extents)
    return out


def checksum_params(named) -> str:
    """SHA-256 over the serialized byte stream of the named tensors."""
    return hashlib.sha256(_encode(named)).hexdigest()
