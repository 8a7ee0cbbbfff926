"""Binary parameter checkpoints.

Layout: the magic string "ADSM1", then one record per parameter:
name length (u64 LE), name bytes (utf-8), rank (u64 LE), extents
(rank x u64 LE), data (float64 LE, row-major). Round-trips bit-exactly.
"""

import struct

import numpy as np

MAGIC = b"ADSM1"


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, named_arrays):
    """Write an ordered mapping of name -> float64 ndarray."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in named_arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of name -> ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an ADSM1 checkpoint")
    out = {}
    off = 5
    total = len(blob)
    while off < total:
        try:
            (nlen,) = struct.unpack_from("<Q", blob, off)
            off += 8
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<Q", blob, off)
            off += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = 1
            for s in shape:
                count *= s
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
            off += 8 * count
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt record") from exc
        if off > total:
            raise CheckpointError(f"{path}: record for {name!r} runs past EOF")
        out[name] = arr.reshape(shape)
    return out
