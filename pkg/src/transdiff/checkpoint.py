"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TDIF"                      magic
    u32   format version
    u64   training step
    u32   n, then n bytes        UTF-8 JSON: model config, phase, extra metadata
    u32   tensor count
    per tensor:
      u16 name length, name (UTF-8)
      u8  ndim, ndim x u32 extents
      prod(extents) x f32 data, row-major
    u32   CRC-32 of every preceding byte

Tensor names are prefixed ``param/``, ``ema/`` or ``opt/`` (optimizer moments).
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig

MAGIC = b"TDIF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    ema: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"ema/{k}": v for k, v in self.ema.items()})
        out.update({f"opt/{k}": v for k, v in self.optimizer.items()})
        return out


def _f32_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"model_config": ckpt.model_config.to_dict(), "meta": ckpt.meta}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, ckpt.step, len(header)), header]
    tensors = ckpt.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.dim()}I", t.dim(), *t.shape))
        parts.append(_f32_bytes(t))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise CheckpointError("not a TDIF checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    version, step, hlen = struct.unpack_from("<IQI", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    pos = 20
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    groups: dict[str, dict[str, torch.Tensor]] = {"param": {}, "ema": {}, "opt": {}}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        n = math.prod(shape)
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown tensor group in {name!r}")
        groups[group][key] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=groups["param"],
        ema=groups["ema"],
        optimizer=groups["opt"],
        step=step,
        meta=header["meta"],
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
