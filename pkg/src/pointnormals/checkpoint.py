"""Flat binary container for named float64 arrays, plus a JSON sidecar.

Layout (all integers 64-bit little-endian):
    magic "SNEW" | version | entry count
    per entry: name length | name bytes (UTF-8) | rank | dims... | float64
    little-endian payload in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SNEW"
VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or truncated."""


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays in dict order; round-trips bit-exactly through load_arrays."""
    chunks = [MAGIC, struct.pack("<qq", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    """Parse a container written by save_arrays; preserves entry order."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    def take_i64(count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}q", take(8 * count))

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version, count = take_i64(2)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if count < 0:
        raise CheckpointError(f"{path}: negative entry count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take_i64()
        if name_len < 0:
            raise CheckpointError(f"{path}: negative name length")
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = take_i64()
        if rank < 0:
            raise CheckpointError(f"{path}: negative rank for {name!r}")
        shape = take_i64(rank) if rank else ()
        size = 1
        for dim in shape:
            if dim < 0:
                raise CheckpointError(f"{path}: negative dimension for {name!r}")
            size *= dim
        payload = take(8 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return arrays


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write the binary container and, if given, a JSON config sidecar."""
    save_arrays(path, arrays)
    if config is not None:
        sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Load the container and its sidecar config (None if no sidecar exists)."""
    arrays = load_arrays(path)
    sidecar = sidecar_path(path)
    config = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return arrays, config
