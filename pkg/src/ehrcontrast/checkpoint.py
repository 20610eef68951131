"""Binary checkpoint format.

Layout (little-endian)::

    b"EHRCKPT1" | u32 version | str config
    u32 count | count x tensor          # model parameters
    u32 count | count x tensor          # optimizer state
    u32 epoch | str rng_state (JSON)

    str    = u32 byte length, UTF-8 bytes
    tensor = str name | u32 rank | rank x u32 extent | float64 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EHRCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        _write_str(buf, self.config_text)
        _write_tensors(buf, self.params)
        _write_tensors(buf, self.optimizer)
        buf.write(struct.pack("<I", self.epoch))
        _write_str(buf, json.dumps(self.rng_state, sort_keys=True))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        buf = io.BytesIO(raw)
        if buf.read(8) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = _unpack(buf, "<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_text = _read_str(buf)
        params = _read_tensors(buf)
        optimizer = _read_tensors(buf)
        (epoch,) = _unpack(buf, "<I")
        rng_state = json.loads(_read_str(buf))
        if buf.read(1):
            raise CheckpointError("trailing bytes after checkpoint")
        return cls(config_text, params, optimizer, epoch, rng_state, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _unpack(buf, fmt):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, chunk)


def _write_str(buf, text: str) -> None:
    data = text.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read_str(buf) -> str:
    (n,) = _unpack(buf, "<I")
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data.decode("utf-8")


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_tensors(buf) -> dict[str, np.ndarray]:
    (count,) = _unpack(buf, "<I")
    out = {}
    for _ in range(count):
        name = _read_str(buf)
        (rank,) = _unpack(buf, "<I")
        shape = _unpack(buf, f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        payload = buf.read(8 * n)
        if len(payload) != 8 * n:
            raise CheckpointError(f"truncated payload for {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
