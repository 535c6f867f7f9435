"""TransDiff: an AR transformer encoder producing condition blocks, jointly trained
with a rectified-flow diffusion decoder.

Shapes carry a leading batch axis throughout:

* latent image        (B, h*w, d)
* condition block     (B, (h/f)*(w/f), d*f*f)
* encoder tokens      (B, L, enc_width)
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .blocks import (
    AdaLNBlock,
    BlockLayout,
    FinalLayer,
    TransformerBlock,
    build_mask_1step,
    build_mask_mrar,
    patch_merge,
    timestep_embedding,
    transformer_forward,
)
from .flow import flow_loss, interpolate
from .numeric import SeededRng
from .sampler import SamplerConfig, sample_latent


@dataclass
class ModelConfig:
    h: int = 8
    w: int = 8
    d: int = 4
    f: int = 2
    n_class_tokens: int = 4
    n_classes: int = 8
    enc_depth: int = 4
    enc_width: int = 128
    enc_heads: int = 4
    dec_depth: int = 4
    dec_width: int = 128
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    p_cond_drop: float = 0.1
    max_references: int = 4

    def __post_init__(self):
        if self.f <= 0 or self.h % self.f or self.w % self.f:
            raise ValueError(f"f={self.f} must divide h={self.h} and w={self.w}")
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ValueError("widths must be divisible by head counts")
        if not 0.0 <= self.p_cond_drop < 1.0:
            raise ValueError("p_cond_drop must lie in [0, 1)")
        if min(self.n_class_tokens, self.n_classes, self.d) <= 0 or self.max_references < 0:
            raise ValueError("invalid model sizes")

    @property
    def n_latent_tokens(self) -> int:
        return self.h * self.w

    @property
    def n_cond_tokens(self) -> int:
        return (self.h // self.f) * (self.w // self.f)

    @property
    def cond_dim(self) -> int:
        return self.d * self.f * self.f

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.n_latent_tokens, self.d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def _full_scale_preset(enc_depth, dec_depth, width, heads):
    # 16x16x16 continuous latents, 256 condition tokens, 64 class tokens
    return dict(h=16, w=16, d=16, f=1, n_class_tokens=64, n_classes=1000,
                enc_depth=enc_depth, enc_width=width, enc_heads=heads,
                dec_depth=dec_depth, dec_width=width, dec_heads=heads)


PRESETS: dict[str, dict] = {
    "micro": dict(h=4, w=4, d=2, f=2, n_class_tokens=2, n_classes=3,
                  enc_depth=1, enc_width=16, enc_heads=2, dec_depth=1, dec_width=16, dec_heads=2,
                  mlp_ratio=2.0, max_references=2),
    # micro geometry, wide enough to fit eight classes in a few thousand steps
    "toy": dict(h=4, w=4, d=2, f=2, n_class_tokens=4, n_classes=8,
                enc_depth=2, enc_width=64, enc_heads=4, dec_depth=2, dec_width=64, dec_heads=4,
                mlp_ratio=2.0),
    "desk": {},
    # full-scale block counts and widths; documented, not exercised by the tests
    "B": _full_scale_preset(24, 12, 768, 12),
    "L": _full_scale_preset(32, 16, 1024, 16),
    "H": _full_scale_preset(40, 20, 1280, 16),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class AssembledInput:
    tokens: torch.Tensor
    layout: BlockLayout
    mask: torch.Tensor
    class_id: torch.Tensor


def _as_class_ids(class_id, batch: Optional[int] = None) -> torch.Tensor:
    ids = torch.as_tensor(class_id, dtype=torch.long).reshape(-1)
    if batch is not None and ids.numel() == 1 and batch != 1:
        ids = ids.expand(batch)
    return ids


class TransDiff(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        we, wd = cfg.enc_width, cfg.dec_width
        nc, dc = cfg.n_cond_tokens, cfg.cond_dim

        # AR encoder
        self.class_emb = nn.Parameter(0.02 * torch.randn(cfg.n_classes, cfg.n_class_tokens, we))
        self.mask_emb = nn.Parameter(0.02 * torch.randn(nc, dc))
        self.in_proj = nn.Linear(dc, we)
        self.pos_class = nn.Parameter(0.02 * torch.randn(cfg.n_class_tokens, we))
        self.pos_mask = nn.Parameter(0.02 * torch.randn(nc, we))
        self.pos_image = nn.Parameter(0.02 * torch.randn(nc, we))
        self.ref_emb = nn.Parameter(0.02 * torch.randn(max(cfg.max_references, 1), we))
        self.enc_blocks = nn.ModuleList(
            TransformerBlock(we, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth)
        )
        self.enc_norm = nn.LayerNorm(we)
        self.out_proj = nn.Linear(we, dc)

        # diffusion decoder
        self.x_proj = nn.Linear(cfg.d, wd)
        self.pos_x = nn.Parameter(0.02 * torch.randn(cfg.n_latent_tokens, wd))
        self.c_proj = nn.Linear(dc, wd)
        self.null_cond = nn.Parameter(0.02 * torch.randn(nc, dc))
        self.t_mlp = nn.Sequential(nn.Linear(wd, wd), nn.SiLU(), nn.Linear(wd, wd))
        self.dec_blocks = nn.ModuleList(
            AdaLNBlock(wd, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth)
        )
        self.final = FinalLayer(wd, cfg.d)
        self.register_buffer(
            "dec_mask", torch.zeros(nc + cfg.n_latent_tokens, nc + cfg.n_latent_tokens), persistent=False
        )

    # ---- input assembly -------------------------------------------------

    def _base_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if bool(((ids < 0) | (ids >= cfg.n_classes)).any()):
            raise ValueError(f"class_id out of range [0, {cfg.n_classes})")
        cls_tok = self.class_emb[ids] + self.pos_class
        mask_tok = self.in_proj(self.mask_emb) + self.pos_mask
        return torch.cat([cls_tok, mask_tok.expand(ids.numel(), -1, -1)], dim=1)

    def assemble_1step(self, class_id) -> AssembledInput:
        """[class block, mask block] under a bidirectional mask."""
        ids = _as_class_ids(class_id)
        cfg = self.config
        layout = BlockLayout.build(cfg.n_class_tokens, cfg.n_cond_tokens)
        return AssembledInput(self._base_tokens(ids), layout, build_mask_1step(layout), ids)

    def assemble_mrar(self, class_id, prev_latents: Sequence[torch.Tensor] | torch.Tensor) -> AssembledInput:
        """[class, mask, ref_0, ..., ref_{n-1}] under the block-causal mask.

        ``prev_latents`` is a list of (B, h*w, d) latents or a (B, n, h*w, d) tensor.
        """
        cfg = self.config
        if isinstance(prev_latents, torch.Tensor) and prev_latents.dim() == 4:
            refs = list(prev_latents.unbind(1))
        else:
            refs = [r if r.dim() == 3 else r.unsqueeze(0) for r in prev_latents]
        if len(refs) > cfg.max_references:
            raise ValueError(f"too many references: {len(refs)} > {cfg.max_references}")
        if not refs:
            return self.assemble_1step(class_id)
        batch = refs[0].shape[0]
        ids = _as_class_ids(class_id, batch)
        if ids.numel() != batch:
            raise ValueError("class ids and reference batch sizes differ")
        parts = [self._base_tokens(ids)]
        for i, ref in enumerate(refs):
            if ref.shape[1:] != cfg.latent_shape:
                raise ValueError(f"reference latent shape {tuple(ref.shape[1:])} != {cfg.latent_shape}")
            merged = patch_merge(ref, cfg.h, cfg.w, cfg.f)
            parts.append(self.in_proj(merged) + self.pos_image + self.ref_emb[i])
        layout = BlockLayout.build(cfg.n_class_tokens, cfg.n_cond_tokens, [cfg.n_cond_tokens] * len(refs))
        return AssembledInput(torch.cat(parts, dim=1), layout, build_mask_mrar(layout), ids)

    # ---- encoder / decoder ----------------------------------------------

    def encode_conditions(self, inp: AssembledInput) -> list[torch.Tensor]:
        """One condition block per image: the mask block, then each reference block."""
        out = transformer_forward(inp.tokens, inp.mask, self.enc_blocks)
        out = self.out_proj(self.enc_norm(out))
        spans = inp.layout.spans()
        return [out[:, start:stop] for start, stop in spans[1:]]

    def forward(self, class_ids, latents, t, eps, drop=None):
        """Joint loss of a batch; see :func:`joint_loss`."""
        return joint_loss(self, class_ids, latents, t, eps, drop)

    def cond_positions(self) -> torch.Tensor:
        """Decoder position of condition token j: mean position of the f x f patch it covers."""
        cfg = self.config
        merged = patch_merge(self.pos_x, cfg.h, cfg.w, cfg.f)
        return merged.reshape(cfg.n_cond_tokens, cfg.f * cfg.f, cfg.dec_width).mean(1)

    def decode_velocity(
        self,
        x_t: torch.Tensor,
        t,
        condition: Optional[torch.Tensor],
        drop: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Velocity at the noisy tokens given prepended condition tokens.

        ``condition=None`` uses the learned null block; ``drop`` (bool, per batch
        item) swaps in the null block for selected items.
        """
        cfg = self.config
        if x_t.dim() == 2:
            x_t = x_t.unsqueeze(0)
        if x_t.shape[1:] != cfg.latent_shape:
            raise ValueError(f"x_t shape {tuple(x_t.shape[1:])} != {cfg.latent_shape}")
        batch = x_t.shape[0]
        null = self.null_cond.expand(batch, -1, -1)
        if condition is None:
            cond = null
        else:
            if condition.dim() == 2:
                condition = condition.unsqueeze(0)
            if condition.shape[1:] != (cfg.n_cond_tokens, cfg.cond_dim):
                raise ValueError(f"condition shape {tuple(condition.shape[1:])} is not a condition block")
            cond = condition.expand(batch, -1, -1)
            if drop is not None:
                cond = torch.where(drop.reshape(-1, 1, 1), null, cond)
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(batch)
        temb = self.t_mlp(timestep_embedding(t, cfg.dec_width))
        tokens = torch.cat([self.c_proj(cond) + self.cond_positions(), self.x_proj(x_t) + self.pos_x], dim=1)
        h = transformer_forward_adaln(tokens, self.dec_mask, self.dec_blocks, temb)
        return self.final(h[:, cfg.n_cond_tokens:], temb)


def transformer_forward_adaln(tokens, mask, blocks, temb):
    x = tokens
    for block in blocks:
        x = block(x, mask, temb)
    return x


# ---- training objective -------------------------------------------------

def joint_loss(
    model,
    class_ids: torch.Tensor,
    latents: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    drop: Optional[torch.Tensor] = None,
    latent_classes: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Flow-matching loss of every image of every sequence given its AR condition.

    latents: (B, n+1, h*w, d) same-class sequences x_0..x_n; the encoder sees
    x_0..x_{n-1} and yields n+1 conditions, condition i is paired with x_i.
    t: (B, n+1) times, eps: noise shaped like ``latents``, drop: (B,) bool
    condition-dropout flags.
    """
    if latents.dim() != 4:
        raise ValueError("latents must be (B, n+1, h*w, d)")
    batch, n_img = latents.shape[:2]
    class_ids = _as_class_ids(class_ids, batch)
    if latent_classes is not None and bool((latent_classes != class_ids[:, None]).any()):
        raise ValueError("class mismatch within a sequence")
    if t.shape != (batch, n_img) or eps.shape != latents.shape:
        raise ValueError("t must be (B, n+1) and eps shaped like latents")
    n_refs = n_img - 1
    if n_refs == 0:
        inp = model.assemble_1step(class_ids)
    else:
        inp = model.assemble_mrar(class_ids, latents[:, :n_refs])
    conds = torch.stack(model.encode_conditions(inp), dim=1)  # (B, n+1, Nc, Dc)

    x = latents.reshape(batch * n_img, *latents.shape[2:])
    e = eps.reshape_as(x)
    tf = t.reshape(-1)
    x_t = interpolate(x, e, tf)
    flat_drop = None if drop is None else drop.repeat_interleave(n_img)
    v = model.decode_velocity(x_t, tf, conds.reshape(batch * n_img, *conds.shape[2:]), flat_drop)
    return flow_loss(v, x, e)


# ---- inference ------------------------------------------------------------

def _sample_with(model: TransDiff, condition: torch.Tensor, cfg: SamplerConfig, rng: SeededRng):
    batch = condition.shape[0]
    return sample_latent(
        lambda x, t: model.decode_velocity(x, t, condition),
        lambda x, t: model.decode_velocity(x, t, None),
        cfg,
        (batch, *model.config.latent_shape),
        rng,
    )


@torch.no_grad()
def infer_1step(model: TransDiff, class_id: int, cfg: SamplerConfig, rng: SeededRng, n_samples: int = 1):
    """Assemble [class, mask], encode once, decode from noise."""
    ids = torch.full((n_samples,), int(class_id), dtype=torch.long)
    (condition,) = model.encode_conditions(model.assemble_1step(ids))
    return _sample_with(model, condition, cfg, rng)


@torch.no_grad()
def infer_mrar(
    model: TransDiff,
    class_id: int,
    n_refs: int,
    cfg: SamplerConfig,
    rng: SeededRng,
    n_samples: int = 1,
    return_trace: bool = False,
):
    """Generate n_refs + 1 images in turn, each conditioned on all earlier outputs.

    Returns the last image, or ``(outputs, conditions)`` lists when ``return_trace``.
    """
    if not 0 <= n_refs <= model.config.max_references:
        raise ValueError(f"n_refs must lie in [0, {model.config.max_references}]")
    ids = torch.full((n_samples,), int(class_id), dtype=torch.long)
    outputs: list[torch.Tensor] = []
    conditions: list[torch.Tensor] = []
    for i in range(n_refs + 1):
        inp = model.assemble_1step(ids) if i == 0 else model.assemble_mrar(ids, outputs)
        c_i = model.encode_conditions(inp)[i]
        conditions.append(c_i)
        outputs.append(_sample_with(model, c_i, cfg, rng))
    if return_trace:
        return outputs, conditions
    return outputs[-1]


def decode_from_condition(model: TransDiff, condition: torch.Tensor, cfg: SamplerConfig, rng: SeededRng):
    """Sample latents from an explicit (possibly fused) condition block."""
    with torch.no_grad():
        if condition.dim() == 2:
            condition = condition.unsqueeze(0)
        return _sample_with(model, condition, cfg, rng)
