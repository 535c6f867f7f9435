"""Command-line entry point: ``transdiff <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .analysis import format_metrics, metrics_csv
from .config import ConfigError, load_config
from .data import SyntheticDatasetSpec
from .export import save_pgm, save_raw
from .model import preset
from .numeric import SeededRng, precision
from .sampler import SIGMA_FORMS, SIGMA_SCHEDULES, SamplerConfig

log = logging.getLogger("transdiff")


def _data_spec(ckpt, fallback: SyntheticDatasetSpec) -> SyntheticDatasetSpec:
    meta = ckpt.meta.get("data_spec")
    return SyntheticDatasetSpec(**meta) if meta else fallback


def _load_model(path, use_ema=True):
    from .training import model_from_checkpoint

    ckpt = ckpt_io.load(path)
    return ckpt, model_from_checkpoint(ckpt, use_ema=use_ema)


def _sampler(args, base: SamplerConfig) -> SamplerConfig:
    fields = {
        "steps": args.steps, "mode": args.mode, "s1": args.s1, "s2": args.s2,
        "sigma_base": args.sigma_base, "sigma_form": args.sigma_form,
        "sigma_schedule": args.sigma_schedule, "cfg_scale": args.cfg,
    }
    kw = {**base.__dict__, **{k: v for k, v in fields.items() if v is not None}}
    return SamplerConfig(**kw)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_train(args, phase: str) -> int:
    from .plotting import plot_loss_curve
    from .training import TrainConfig, train, write_loss_csv

    run = load_config(args.config)
    overrides = {"phase": phase}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = TrainConfig(**{**run.train.__dict__, **overrides})
    model_cfg = preset(args.preset) if args.preset else run.model
    init = ckpt_io.load(args.init) if getattr(args, "init", None) else None
    data = run.data
    if init is not None and "data_spec" in init.meta and args.config is None:
        data = SyntheticDatasetSpec(**init.meta["data_spec"])
    elif (data.h, data.w, data.d) != (model_cfg.h, model_cfg.w, model_cfg.d):
        data = SyntheticDatasetSpec(**{**data.__dict__, "h": model_cfg.h, "w": model_cfg.w, "d": model_cfg.d,
                                       "n_classes": min(data.n_classes, model_cfg.n_classes)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    result = train(tcfg, model_cfg, data, init=init, checkpoint_dir=out)
    ckpt_path = out / f"{phase}.tdif"
    ckpt_io.save(result.checkpoint, ckpt_path)
    write_loss_csv(result.losses, out / f"{phase}_loss.csv")
    if result.losses:
        plot_loss_curve(result.losses, out / f"{phase}_loss.png")
    summary = {
        "phase": phase,
        "steps": result.checkpoint.step,
        "lr": tcfg.effective_lr,
        "first_loss": result.losses[0]["loss"] if result.losses else float("nan"),
        "last_loss": result.losses[-1]["loss"] if result.losses else float("nan"),
        "seconds": round(time.time() - t0, 1),
        "checkpoint": str(ckpt_path),
    }
    sys.stdout.write(format_metrics(summary))
    return 0


def cmd_sample(args) -> int:
    from .model import infer_1step, infer_mrar
    from .plotting import plot_samples

    run = load_config(args.config)
    ckpt, model = _load_model(args.ckpt, not args.no_ema)
    cfg = _sampler(args, run.sampler)
    rng = SeededRng(args.seed, 0)
    if args.paradigm == "1step":
        x = infer_1step(model, args.class_id, cfg, rng, n_samples=args.n)
    else:
        x = infer_mrar(model, args.class_id, args.refs, cfg, rng, n_samples=args.n)
    mc = ckpt.model_config
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_raw(x, prefix.with_suffix(".tdlt"))
    save_pgm(x, mc.h, mc.w, prefix.with_suffix(".pgm"))
    plot_samples(x, mc.h, mc.w, prefix.with_suffix(".png"), title=f"class {args.class_id}, {args.paradigm}")
    sys.stdout.write(format_metrics({
        "class": args.class_id, "paradigm": args.paradigm, "n": args.n, "finite": bool(torch.isfinite(x).all()),
        "mean": float(x.mean()), "std": float(x.std()), "out": str(prefix.with_suffix(".tdlt")),
    }))
    return 0


def cmd_fuse(args) -> int:
    from .experiments import fusion_experiment
    from .plotting import plot_samples

    run = load_config(args.config)
    ckpt, model = _load_model(args.ckpt, not args.no_ema)
    spec = _data_spec(ckpt, run.data)
    res = fusion_experiment(model, spec, args.class_a, args.class_b, args.k, args.n,
                            _sampler(args, run.sampler), args.seed, args.fusion)
    mc = ckpt.model_config
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        save_raw(res.samples, prefix.with_suffix(".tdlt"))
        save_pgm(res.samples[:16], mc.h, mc.w, prefix.with_suffix(".pgm"))
        plot_samples(res.samples[:16], mc.h, mc.w, prefix.with_suffix(".png"),
                     title=f"fused {args.class_a}+{args.class_b}, k={res.k}")
    sys.stdout.write(format_metrics({
        "class_a": res.class_a, "class_b": res.class_b, "k": res.k,
        "ratio_a": res.ratio_a, "ratio_b": res.ratio_b, "between": res.between,
    }))
    return 0


def cmd_diversity(args) -> int:
    from .experiments import condition_diversity
    from .plotting import plot_diversity

    run = load_config(args.config)
    ckpt, model = _load_model(args.ckpt, not args.no_ema)
    classes = [args.class_id] if args.class_id is not None else range(ckpt.model_config.n_classes)
    paradigms = ["1step", "mrar"] if args.paradigm == "both" else [args.paradigm]
    cfg = _sampler(args, run.sampler)
    rows = []
    for c in classes:
        for p in paradigms:
            rows.append({"class": c, "paradigm": p,
                         "diversity": condition_diversity(model, c, p, args.refs, args.n, cfg, args.seed)})
    for r in rows:
        sys.stdout.write(format_metrics({f"diversity.{r['paradigm']}.class{r['class']}": r["diversity"]}))
    if args.out:
        out = Path(args.out)
        _write(out / "diversity.csv", metrics_csv(rows))
        plot_diversity(rows, out / "diversity.png")
    return 0


def cmd_eval(args) -> int:
    from .experiments import evaluate
    from .plotting import plot_eval
    from .training import build_model

    run = load_config(args.config)
    ckpt, model = _load_model(args.ckpt, not args.no_ema)
    spec = _data_spec(ckpt, run.data)
    cfg = _sampler(args, run.sampler)
    rows = evaluate(model, spec, cfg, args.n, args.seed, args.paradigm, args.refs)
    baseline = None
    if args.baseline:
        seed = ckpt.meta.get("train_config", {}).get("seed", 0)
        baseline = evaluate(build_model(ckpt.model_config, seed).eval(), spec, cfg, args.n, args.seed)
    summary = {
        "sliced_wasserstein.mean": sum(r["sliced_wasserstein"] for r in rows) / len(rows),
        "centroid_accuracy.mean": sum(r["centroid_accuracy"] for r in rows) / len(rows),
    }
    if baseline:
        summary["baseline.sliced_wasserstein.mean"] = sum(r["sliced_wasserstein"] for r in baseline) / len(baseline)
    for r in rows:
        summary[f"sliced_wasserstein.class{r['class']}"] = r["sliced_wasserstein"]
        summary[f"centroid_accuracy.class{r['class']}"] = r["centroid_accuracy"]
    sys.stdout.write(format_metrics(summary))
    if args.out:
        out = Path(args.out)
        csv_rows = [dict(r, baseline_sliced_wasserstein=b["sliced_wasserstein"]) for r, b in zip(rows, baseline)] \
            if baseline else rows
        _write(out / "eval.csv", metrics_csv(csv_rows))
        _write(out / "eval.txt", format_metrics(summary))
        plot_eval(rows, out / "eval.png", baseline)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import joint_loss_grad_check

    with precision("float64"):
        err = joint_loss_grad_check(preset(args.preset), seed=args.seed, step=args.step, order=args.order)
    ok = err <= args.tol
    sys.stdout.write(format_metrics({"preset": args.preset, "max_relative_error": err, "tolerance": args.tol,
                                     "result": "pass" if ok else "fail"}))
    return 0 if ok else 1


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, help="integration steps")
    p.add_argument("--mode", choices=("ode", "sde"))
    p.add_argument("--s1", type=float, help="drift scale")
    p.add_argument("--s2", type=float, help="diffusion scale")
    p.add_argument("--sigma-base", type=float, dest="sigma_base")
    p.add_argument("--sigma-form", choices=SIGMA_FORMS, dest="sigma_form")
    p.add_argument("--sigma-schedule", choices=SIGMA_SCHEDULES, dest="sigma_schedule")
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true", help="use raw weights instead of the EMA shadow")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="transdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "finetune-mrar"):
        p = sub.add_parser(name, parents=[common], help="1-step pretraining" if name == "train" else "MRAR fine-tuning")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--preset", help="model preset (overrides [model])")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        if name == "finetune-mrar":
            p.add_argument("--init", required=True, help="pretrain checkpoint")
        else:
            p.add_argument("--init", help="checkpoint to resume")

    p = sub.add_parser("sample", parents=[common], help="generate latents")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", type=int, dest="class_id", required=True)
    p.add_argument("--paradigm", choices=("1step", "mrar"), default="1step")
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True, help="output prefix")
    _add_sampler_flags(p)

    p = sub.add_parser("fuse", parents=[common], help="decode from fused conditions of two classes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class-a", type=int, required=True)
    p.add_argument("--class-b", type=int, required=True)
    p.add_argument("--k", type=int, help="tokens taken from class a (default half)")
    p.add_argument("--fusion", choices=("prefix", "interleave"), default="prefix",
                   help="which token positions come from class a")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--out", help="output prefix")
    _add_sampler_flags(p)

    p = sub.add_parser("diversity", parents=[common], help="condition-token diversity metric")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", type=int, dest="class_id")
    p.add_argument("--paradigm", choices=("1step", "mrar", "both"), default="both")
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", help="directory for CSV and figure")
    _add_sampler_flags(p)

    p = sub.add_parser("eval", parents=[common], help="sliced-Wasserstein and centroid accuracy against held-out data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--paradigm", choices=("1step", "mrar"), default="1step")
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--baseline", action="store_true", help="also evaluate the untrained initialisation")
    p.add_argument("--out", help="directory for CSV, key=value summary and figure")
    _add_sampler_flags(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the joint loss (float64)")
    p.add_argument("--preset", default="micro")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--order", type=int, choices=(2, 4), default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command in ("train", "finetune-mrar"):
            phase = "pretrain-1step" if args.command == "train" else "finetune-mrar"
            return cmd_train(args, phase)
        return {
            "sample": cmd_sample, "fuse": cmd_fuse, "diversity": cmd_diversity,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck,
        }[args.command](args)
    except (ConfigError, ckpt_io.CheckpointError, ValueError) as exc:
        sys.stderr.write(f"transdiff: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
