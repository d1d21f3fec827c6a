"""Binary checkpoint format.

Layout (little-endian): magic ``MPCG``, u32 version (1), u32 tensor count;
then per tensor a u16 name length, the UTF-8 name, a u8 rank, one u32 per
extent and the raw float32 values in C order.

The model configuration is kept next to the weights in ``<path>.cfg`` as
``key = value`` lines so a checkpoint can be rebuilt without guessing.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..config import format_kv, read_kv
from .model import MPCGNet, NetConfig

MAGIC = b"MPCG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype="<f4", order="C")
        if arr.ndim > 255:
            raise CheckpointError(f"rank {arr.ndim} of {name} exceeds 255")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(f"{os.fspath(path)}.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MPCG checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def config_path(path: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(path)}.cfg")


def save_checkpoint(path: str | os.PathLike, net: MPCGNet) -> None:
    write_tensors(path, net.state_dict())
    config_path(path).write_text(format_kv(net.cfg.to_pairs()))


def read_config_sidecar(path: str | os.PathLike) -> NetConfig:
    cfg_file = config_path(path)
    if not cfg_file.exists():
        return NetConfig()
    try:
        return NetConfig.from_pairs(read_kv(cfg_file))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{cfg_file}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> MPCGNet:
    """Rebuild the network from its sidecar config and load the weights."""
    net = MPCGNet(read_config_sidecar(path))
    try:
        net.load_state_dict(read_tensors(path))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: weights do not match the model config: {exc}") from exc
    return net
