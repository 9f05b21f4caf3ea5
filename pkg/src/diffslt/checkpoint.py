"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"DSLTCKPT" | version | meta_len | meta (UTF-8 JSON)
    then per record: name_len | name (UTF-8) | rank | dims... | float32 payload

Records are written in sorted name order so that saving the same arrays
twice yields identical bytes. ``meta`` carries the config snapshot, its
stage hash and the RNG state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSLTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, mismatched or unexpected checkpoint content."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expected: set[str] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and metadata; with ``expected``, unknown or missing names raise."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        arrays[name] = arr.astype(np.float32)
    if expected is not None:
        unknown = sorted(set(arrays) - set(expected))
        missing = sorted(set(expected) - set(arrays))
        if unknown:
            raise CheckpointError(f"{path}: unknown entries {unknown[:5]}")
        if missing:
            raise CheckpointError(f"{path}: missing entries {missing[:5]}")
    return arrays, meta


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
