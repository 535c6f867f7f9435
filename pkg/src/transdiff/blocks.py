"""Transformer building blocks shared by the AR encoder and the diffusion decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

SEGMENT_KINDS = ("class", "mask", "image")


@dataclass(frozen=True)
class BlockLayout:
    """Ordered token segments of an encoder input: class, mask, then zero or more images."""

    segments: tuple[tuple[str, int], ...]

    def __post_init__(self):
        segs = tuple((str(k), int(n)) for k, n in self.segments)
        object.__setattr__(self, "segments", segs)
        if len(segs) < 2 or segs[0][0] != "class" or segs[1][0] != "mask":
            raise ValueError("layout must start with one class segment followed by one mask segment")
        for kind, count in segs:
            if kind not in SEGMENT_KINDS:
                raise ValueError(f"unknown segment kind {kind!r}")
            if count <= 0:
                raise ValueError("segment token counts must be positive")
        if any(kind != "image" for kind, _ in segs[2:]):
            raise ValueError("only image segments may follow the mask segment")

    @classmethod
    def build(cls, n_class: int, n_mask: int, image_sizes: Sequence[int] = ()) -> "BlockLayout":
        return cls((("class", n_class), ("mask", n_mask), *(("image", s) for s in image_sizes)))

    @property
    def n_tokens(self) -> int:
        return sum(n for _, n in self.segments)

    @property
    def n_images(self) -> int:
        return len(self.segments) - 2

    def spans(self) -> list[tuple[int, int]]:
        """(start, stop) token ranges of every segment."""
        out, pos = [], 0
        for _, n in self.segments:
            out.append((pos, pos + n))
            pos += n
        return out

    def causal_blocks(self) -> list[tuple[int, int]]:
        """Token ranges of the causal blocks: (class + mask) first, then one per image."""
        spans = self.spans()
        return [(0, spans[1][1]), *spans[2:]]


def check_mask(mask: torch.Tensor) -> None:
    if mask.dim() != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError(f"attention mask must be square, got {tuple(mask.shape)}")
    ok = (mask == 0) | torch.isneginf(mask)
    if not bool(ok.all()):
        raise ValueError("attention mask entries must be 0 or -inf")
    if not bool((mask.diagonal() == 0).all()):
        raise ValueError("attention mask diagonal must be 0")


def build_mask_1step(layout: BlockLayout) -> torch.Tensor:
    """Bidirectional all-zero mask over class and mask tokens."""
    if layout.n_images:
        raise ValueError("1-step layout must not contain image segments")
    n = layout.n_tokens
    return torch.zeros(n, n)


def build_mask_mrar(layout: BlockLayout) -> torch.Tensor:
    """Block-causal mask: a token sees every token of its own block and of earlier blocks."""
    n = layout.n_tokens
    block_id = torch.empty(n, dtype=torch.long)
    for b, (start, stop) in enumerate(layout.causal_blocks()):
        block_id[start:stop] = b
    allowed = block_id[None, :] <= block_id[:, None]
    mask = torch.zeros(n, n)
    mask.masked_fill_(~allowed, float("-inf"))
    return mask


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_head) + mask) v over the last two axes."""
    n = q.shape[-2]
    if k.shape[-2] != n or v.shape[-2] != n:
        raise ValueError("q, k and v must have the same token count")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("q and k head dims differ")
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {n} tokens")
    if bool(torch.isneginf(mask).all(dim=-1).any()):
        raise ValueError("fully masked attention row")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]) + mask
    return torch.softmax(scores, dim=-1) @ v


def patch_merge(x: torch.Tensor, h: int, w: int, f: int) -> torch.Tensor:
    """(..., h*w, d) latent -> (..., (h/f)*(w/f), d*f*f) condition-resolution tokens.

    Each output row flattens one non-overlapping f x f spatial patch, ordered
    (row-in-patch, column-in-patch, channel).
    """
    if f <= 0 or h % f or w % f:
        raise ValueError(f"f={f} must divide h={h} and w={w}")
    if x.shape[-2] != h * w:
        raise ValueError(f"expected {h * w} tokens, got {x.shape[-2]}")
    lead, d = x.shape[:-2], x.shape[-1]
    y = x.reshape(*lead, h // f, f, w // f, f, d)
    nl = len(lead)
    y = y.permute(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, (h // f) * (w // f), f * f * d)


def patch_split(c: torch.Tensor, h: int, w: int, f: int) -> torch.Tensor:
    """Exact inverse of :func:`patch_merge`."""
    if f <= 0 or h % f or w % f:
        raise ValueError(f"f={f} must divide h={h} and w={w}")
    lead = c.shape[:-2]
    if c.shape[-2] != (h // f) * (w // f) or c.shape[-1] % (f * f):
        raise ValueError("token grid does not match h, w, f")
    d = c.shape[-1] // (f * f)
    y = c.reshape(*lead, h // f, w // f, f, f, d)
    nl = len(lead)
    y = y.permute(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return y.reshape(*lead, h * w, d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1] (scaled by 1000, DiT convention)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        *lead, n, width = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.heads, width // self.heads)
        qkv = qkv.movedim(-3, 0).transpose(-3, -2)  # (3, ..., heads, n, d_head)
        out = attention(qkv[0], qkv[1], qkv[2], mask)
        out = out.transpose(-3, -2).reshape(*lead, n, width)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, width: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(width * ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block with residuals."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio)

    def zero_out(self) -> None:
        """Zero the residual-branch output projections so the block is the identity."""
        for lin in (self.attn.proj, self.mlp.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


def transformer_forward(tokens: torch.Tensor, mask: torch.Tensor, blocks: Sequence[nn.Module]) -> torch.Tensor:
    """Run ``tokens`` through a stack of pre-norm blocks under ``mask``.

    An empty stack is the identity.
    """
    if mask.shape != (tokens.shape[-2], tokens.shape[-2]):
        raise ValueError(f"mask {tuple(mask.shape)} does not match {tokens.shape[-2]} tokens")
    x = tokens
    for block in blocks:
        x = block(x, mask)
    return x


class AdaLNBlock(nn.Module):
    """DiT block: timestep-modulated pre-norm attention and MLP with gated residuals.

    The modulation projection is zero-initialised, so a fresh block is the identity.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = MLP(width, mlp_ratio)
        self.ada = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(temb)).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(-2) * self.attn(modulate(self.norm1(x), shift1, scale1), mask)
        return x + gate2.unsqueeze(-2) * self.mlp(modulate(self.norm2(x), shift2, scale2))


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Linear(width, 2 * width)
        self.linear = nn.Linear(width, out_dim)
        for lin in (self.ada, self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, temb):
        shift, scale = self.ada(F.silu(temb)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))
