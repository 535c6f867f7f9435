"""Latent export: raw tensor files and 8-bit greyscale PGM renders.

Raw tensor layout (little-endian)::

    b"TDLT" | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim x u32 extents | row-major data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

RAW_MAGIC = b"TDLT"
_CODES = {0: "<f4", 1: "<f8"}


def save_raw(t: torch.Tensor, path: str | Path) -> None:
    arr = t.detach().cpu().numpy()
    code = 1 if arr.dtype == np.float64 else 0
    data = arr.astype(_CODES[code]).tobytes()
    header = RAW_MAGIC + struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape)
    Path(path).write_bytes(header + data)


def load_raw(path: str | Path) -> torch.Tensor:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise ValueError("not a raw latent file")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    arr = np.frombuffer(blob, dtype=_CODES[code], offset=6 + 4 * ndim).reshape(shape)
    return torch.from_numpy(arr.copy())


def latent_to_image(latent: torch.Tensor, h: int, w: int) -> np.ndarray:
    """Channel-averaged (h, w) float image of one (h*w, d) latent."""
    return latent.detach().double().reshape(h, w, -1).mean(-1).numpy()


def tile(latents: torch.Tensor, h: int, w: int, pad: int = 1) -> np.ndarray:
    """Lay a batch of latents side by side, separated by ``pad`` NaN columns."""
    imgs = [latent_to_image(x, h, w) for x in latents.reshape(-1, h * w, latents.shape[-1])]
    gap = np.full((h, pad), np.nan)
    parts = []
    for i, img in enumerate(imgs):
        if i:
            parts.append(gap)
        parts.append(img)
    return np.concatenate(parts, axis=1)


def save_pgm(latents: torch.Tensor, h: int, w: int, path: str | Path) -> None:
    """Binary PGM (P5) of the tiled, min-max scaled latents; padding renders black."""
    img = tile(latents, h, w)
    lo, hi = np.nanmin(img), np.nanmax(img)
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.nan_to_num(np.round(scaled * 255), nan=0).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = blob.split(b"\n", 3)
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = map(int, fields[1].split())
    return np.frombuffer(fields[3], dtype=np.uint8).reshape(height, width)
