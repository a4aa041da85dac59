"""Binary parameter checkpoints (``KDLW``) and their key=value sidecar files.

Layout, all little-endian::

    b"KDLW" | u16 version | u32 count |
    count x ( u16 path_len | path utf-8 | u8 rank | rank x u32 dim | f32 data )
"""

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"KDLW"
VERSION = 1


def save_parameters(path, arrays):
    """Write a ``{path: ndarray}`` mapping (or a ParameterSet) as a KDLW file."""
    if hasattr(arrays, "arrays"):
        arrays = arrays.arrays()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"cannot encode parameter {name!r}")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_parameters(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 10
        out = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + klen].decode("utf-8")
            off += klen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def sidecar_path(path):
    return Path(path).with_suffix(".cfg")


def write_config(path, config):
    lines = [f"{k} = {v}" for k, v in config.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path):
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
