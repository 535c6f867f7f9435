"""Two-phase training: 1-step pretraining, then MRAR fine-tuning."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .data import SyntheticDatasetSpec, gen_synthetic, verify_separation
from .model import ModelConfig, TransDiff, joint_loss
from .numeric import SeededRng, rng_normal, rng_uniform

log = logging.getLogger(__name__)

PHASES = ("pretrain-1step", "finetune-mrar")
REFERENCE_PRETRAIN_LR = 8.0e-4
REFERENCE_PRETRAIN_BATCH = 2048
REFERENCE_FINETUNE_LR = 5.0e-5
LOSS_CSV_HEADER = ("step", "phase", "loss", "n_refs", "lr")


def default_lr(phase: str, batch_size: int) -> float:
    """Reference learning rates (8e-4 at batch 2048, 5e-5); the pretrain rate is scaled linearly by batch size."""
    if phase == "pretrain-1step":
        return REFERENCE_PRETRAIN_LR * batch_size / REFERENCE_PRETRAIN_BATCH
    if phase == "finetune-mrar":
        return REFERENCE_FINETUNE_LR
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class TrainConfig:
    phase: str = "pretrain-1step"
    lr: Optional[float] = None  # None -> default_lr(phase, batch_size)
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 64
    steps: int = 2000
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    train_per_class: int = 512
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size <= 0 or self.steps < 0 or self.train_per_class <= 0:
            raise ValueError("batch_size, steps and train_per_class must be positive")

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr is not None else default_lr(self.phase, self.batch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def ema_update(ema: Mapping[str, torch.Tensor], params: Mapping[str, torch.Tensor], decay: float) -> dict[str, torch.Tensor]:
    """decay * ema + (1 - decay) * params, per tensor."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if set(ema) != set(params):
        raise ValueError("ema and params hold different tensor names")
    out = {}
    for name, e in ema.items():
        p = params[name]
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
        out[name] = decay * e + (1 - decay) * p.detach()
    return out


def build_model(model_cfg: ModelConfig, seed: int) -> TransDiff:
    torch.manual_seed(seed)
    return TransDiff(model_cfg)


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> TransDiff:
    model = TransDiff(ckpt.model_config)
    source = ckpt.ema if (use_ema and ckpt.ema) else ckpt.params
    dtype = torch.get_default_dtype()
    model.load_state_dict({k: v.to(dtype) for k, v in source.items()})
    model.eval()
    return model


def _param_dict(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@dataclass
class Batch:
    class_ids: torch.Tensor
    latents: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    drop: torch.Tensor

    @property
    def n_refs(self) -> int:
        return self.latents.shape[1] - 1


_PHASE_STREAM = {"pretrain-1step": 1 << 40, "finetune-mrar": 2 << 40}


def draw_batch(pool: torch.Tensor, cfg: TrainConfig, model_cfg: ModelConfig, step: int) -> Batch:
    """Batch for one step; depends only on (seed, phase, step).

    pool: (n_classes, per_class, h*w, d). Each sequence holds n + 1 distinct
    latents of one class; n is 0 in pretraining and uniform on
    {0..max_references} per batch in fine-tuning.
    """
    rng = SeededRng(cfg.seed, _PHASE_STREAM[cfg.phase] | step)
    n_classes, per_class = pool.shape[:2]
    if cfg.phase == "pretrain-1step":
        n_refs = 0
    else:
        n_refs = int(rng.integers(min(model_cfg.max_references, per_class - 1) + 1, 1)[0])
    bsz = cfg.batch_size
    classes = torch.from_numpy(rng.integers(n_classes, bsz))
    picks = []
    for b in range(bsz):
        idx = torch.from_numpy(rng.permutation(per_class)[: n_refs + 1])
        picks.append(pool[classes[b], idx])
    latents = torch.stack(picks)
    t = rng_uniform(rng, (bsz, n_refs + 1), dtype=latents.dtype)
    eps = rng_normal(rng, latents.shape, dtype=latents.dtype)
    drop = torch.from_numpy(rng.uniform(bsz) < model_cfg.p_cond_drop)
    return Batch(classes, latents, t, eps, drop)


def build_pool(spec: SyntheticDatasetSpec, per_class: int) -> torch.Tensor:
    verify_separation(spec)
    return torch.stack([gen_synthetic(spec, c, per_class) for c in range(spec.n_classes)])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[dict] = field(default_factory=list)


def _restore_optimizer(opt: torch.optim.Optimizer, model: torch.nn.Module, state: Mapping[str, torch.Tensor], step: int):
    for name, p in model.named_parameters():
        if f"exp_avg/{name}" not in state:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": state[f"exp_avg/{name}"].to(p.dtype).clone(),
            "exp_avg_sq": state[f"exp_avg_sq/{name}"].to(p.dtype).clone(),
        }


def _optimizer_tensors(opt: torch.optim.Optimizer, model: torch.nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[f"exp_avg/{name}"] = st["exp_avg"].detach().clone()
            out[f"exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().clone()
    return out


def write_loss_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_loss_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "phase": r["phase"], "loss": float(r["loss"]),
             "n_refs": int(r["n_refs"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    data_spec: SyntheticDatasetSpec,
    init: Optional[Checkpoint] = None,
    checkpoint_dir: str | Path | None = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps of the joint loss and return the final checkpoint.

    ``init`` from the same phase resumes it (optimizer moments and step counter
    included, ``cfg.steps`` is then the total step target); ``init`` from
    pretraining starts a fine-tuning run. Fine-tuning without ``init`` is an error.
    """
    resume = init is not None and init.meta.get("phase") == cfg.phase
    if cfg.phase == "finetune-mrar" and init is None:
        raise ValueError("finetune-mrar requires a pretrain-1step checkpoint")
    if cfg.phase == "finetune-mrar" and not resume and init.meta.get("phase") != "pretrain-1step":
        raise ValueError("finetune-mrar must start from a pretrain-1step checkpoint")
    if init is not None:
        model_cfg = init.model_config
    if (data_spec.h, data_spec.w, data_spec.d) != (model_cfg.h, model_cfg.w, model_cfg.d):
        raise ValueError("dataset geometry does not match the model")
    if data_spec.n_classes > model_cfg.n_classes:
        raise ValueError("dataset has more classes than the model")

    model = build_model(model_cfg, cfg.seed)
    if init is not None:
        model.load_state_dict({k: v.to(torch.get_default_dtype()) for k, v in init.params.items()})
    start = init.step if resume else 0
    ema = dict(init.ema) if (init is not None and init.ema) else _param_dict(model)
    ema = {k: v.to(torch.get_default_dtype()) for k, v in ema.items()}

    lr = cfg.effective_lr
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    if resume:
        _restore_optimizer(opt, model, init.optimizer, start)

    pool = build_pool(data_spec, cfg.train_per_class)
    meta = {"phase": cfg.phase, "train_config": cfg.to_dict(), "data_spec": data_spec.to_dict()}
    rows: list[dict] = []

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(model_cfg, _param_dict(model), {k: v.clone() for k, v in ema.items()},
                          _optimizer_tensors(opt, model), step, dict(meta))

    for step in range(start, cfg.steps):
        batch = draw_batch(pool, cfg, model_cfg, step)
        loss = joint_loss(model, batch.class_ids, batch.latents, batch.t, batch.eps, batch.drop)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss {value} at step {step} ({cfg.phase}, n_refs={batch.n_refs}, lr={lr:g})"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        ema = ema_update(ema, model.state_dict(), cfg.ema_decay)
        rows.append({"step": step, "phase": cfg.phase, "loss": value, "n_refs": batch.n_refs, "lr": lr})
        if on_step is not None:
            on_step(step, value)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ckpt_io.save(snapshot(step + 1), Path(checkpoint_dir) / f"{cfg.phase}-{step + 1:06d}.tdif")
        if step % 500 == 0:
            log.info("%s step %d loss %.5f", cfg.phase, step, value)

    return TrainResult(snapshot(max(cfg.steps, start)), rows)
