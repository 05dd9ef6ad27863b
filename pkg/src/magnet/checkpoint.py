"""Binary parameter container with a JSON config sidecar.

Layout (all integers little-endian)::

    b"MAGN"  u32 version  u32 entry_count
    per entry: u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
               prod(dims) x f32 values

The model config lives next to the binary as ``<stem>.json``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import MAGNet, ModelConfig

MAGIC = b"MAGN"
VERSION = 1

PathLike = Union[str, Path]


def encode(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a MAGN checkpoint (bad magic bytes)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"values of {name!r}"), dtype="<f4")
        state[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError("checkpoint has trailing bytes")
    return state


def config_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save(path: PathLike, model: MAGNet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model.state_dict()))
    config_path(path).write_text(json.dumps(model.config.to_dict(), indent=2) + "\n")
    return path


def load_state(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(buf)


def load_config(path: PathLike) -> ModelConfig:
    cfg = config_path(path)
    try:
        data = json.loads(cfg.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint config {cfg}: {exc}") from None
    try:
        return ModelConfig.from_dict(data)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config {cfg}: {exc}") from None


def load(path: PathLike, config: ModelConfig = None, dtype=np.float32) -> Tuple[MAGNet, ModelConfig]:
    """Rebuild a model from a checkpoint; ``config`` overrides the sidecar."""
    state = load_state(path)
    config = config or load_config(path)
    model = MAGNet(config, dtype=dtype)
    model.load_state_dict(state)
    return model, config
