"""Binary checkpoint format.

Layout (all integers unsigned 32-bit big-endian)::

    b"SNNCKPT1"
    entry count
    per entry:  name length, name (UTF-8), rank, rank x extent,
                prod(extents) float32 values, little-endian

Spiking-layer ``k`` values are rank-0 entries named ``spk<i>.k``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Network

MAGIC = b"SNNCKPT1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack(">I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        parts.append(struct.pack(">I", len(raw)) + raw)
        parts.append(struct.pack(f">I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack(">I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack(">I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack(">I", take(4))
        shape = struct.unpack(f">{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(net: Network, path) -> None:
    tensors = net.state_tensors()
    for i, s in enumerate(net.spiking):
        tensors[f"spk{i}.k"] = s.layer.k_param
    write_checkpoint(path, tensors)


def load_checkpoint(path, net: Network) -> Network:
    """Restore every tensor of ``net`` from ``path``; shapes must match."""
    saved = read_checkpoint(path)
    targets = net.state_tensors()
    for i, s in enumerate(net.spiking):
        targets[f"spk{i}.k"] = s.layer.k_param
    missing = [n for n in targets if n not in saved]
    extra = [n for n in saved if n not in targets]
    if missing or extra:
        raise CheckpointError(f"{path}: entries do not match network (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, dst in targets.items():
        src = saved[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: file {src.shape}, network {dst.shape}")
    for name, dst in targets.items():
        dst[...] = saved[name]
    return net
