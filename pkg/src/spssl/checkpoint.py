"""Binary checkpoint persistence.

Layout: magic "SPCKPT1", then entry count, then per entry: name length +
UTF-8 name, rank, dims, raw float32 values. All integers unsigned 32-bit
little-endian; floats little-endian. Writes are atomic (temp + rename).
"""

import os
import struct
import tempfile

import numpy as np

from .nets import ModelParams
from .tensor import Tensor

MAGIC = b"SPCKPT1"


def save_params(path, params: ModelParams):
    blob = bytearray()
    blob += MAGIC
    entries = list(params.items())
    blob += struct.pack("<I", len(entries))
    for name, t in entries:
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path):
    """Read a checkpoint into an ordered list of (name, float32 array)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(MAGIC)] != MAGIC:
        raise IOError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise IOError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        out.append((name, arr))
    if off != len(data):
        raise IOError(f"{path}: trailing bytes after last entry")
    return out


def load_params(path, architecture_id, requires_grad=False) -> ModelParams:
    """Rebuild ModelParams from a checkpoint plus its architecture id."""
    entries = [(n, Tensor(a, requires_grad=requires_grad)) for n, a in load_arrays(path)]
    return ModelParams(architecture_id, entries)
