"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TIMAE001"
    u32 header length, UTF-8 JSON header {"model_config": ..., "extra": ...}
    u32 tensor count
    per tensor: u32 name length, name, u32 rank, rank x u64 dims, float32 data
    u32 CRC-32 of everything between the magic and the CRC

Parameters are stored as float32, so a float32 model round-trips bitwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .model import ModelConfig, TiMaeModel
from .tensor import Tensor

MAGIC = b"TIMAE001"


def _config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def encode(model: TiMaeModel, extra: dict | None = None) -> bytes:
    header = json.dumps({"model_config": model.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts = [struct.pack("<I", len(header)), header, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def save(model: TiMaeModel, path: str | Path, extra: dict | None = None) -> int:
    """Write the checkpoint; returns its payload CRC."""
    blob = encode(model, extra)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, named float32 arrays)."""
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a Ti-MAE checkpoint (bad magic bytes)")
    payload, crc = blob[len(MAGIC) : -4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint CRC mismatch (file corrupted or truncated)")
    r = _Reader(payload)
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
    if r.pos != len(payload):
        raise FormatError("trailing bytes after the last tensor")
    return header, tensors


def payload_crc(path: str | Path) -> int:
    return struct.unpack("<I", Path(path).read_bytes()[-4:])[0]


def load_into(model: TiMaeModel, path: str | Path) -> dict:
    """Load parameters into ``model``; its config must match the file's."""
    header, tensors = decode(Path(path).read_bytes())
    saved = ModelConfig.from_dict(header["model_config"])
    if _config_json(saved) != _config_json(model.cfg):
        raise VersionError(f"checkpoint config {_config_json(saved)} does not match model config {_config_json(model.cfg)}")
    if set(tensors) != set(model.params):
        raise FormatError("checkpoint parameter names do not match the model")
    for name, arr in tensors.items():
        model.params[name] = Tensor(arr.astype(model.dtype), requires_grad=True)
    return header.get("extra", {})


def load(path: str | Path, dtype=np.float32) -> tuple[TiMaeModel, dict]:
    """Rebuild a model from the config stored in the file."""
    header, _ = decode(Path(path).read_bytes())
    model = TiMaeModel(ModelConfig.from_dict(header["model_config"]), dtype=dtype)
    extra = load_into(model, path)
    return model, extra
