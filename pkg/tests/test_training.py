import numpy as np
import pytest
import torch

from transdiff.data import SyntheticDatasetSpec, class_mean, gen_heldout, gen_synthetic, verify_separation
from transdiff.model import preset
from transdiff.plotting import smooth
from transdiff.training import (
    REFERENCE_FINETUNE_LR,
    TrainConfig,
    build_model,
    build_pool,
    default_lr,
    draw_batch,
    ema_update,
    read_loss_csv,
    train,
    write_loss_csv,
)

MICRO = preset("micro")
MICRO_DATA = SyntheticDatasetSpec(n_classes=3, h=4, w=4, d=2)


def test_synthetic_is_deterministic():
    spec = SyntheticDatasetSpec()
    a, b = gen_synthetic(spec, 2, 5), gen_synthetic(spec, 2, 5)
    assert torch.equal(a, b) and a.shape == (5, 64, 4)
    # sample i depends only on its index
    assert torch.equal(gen_synthetic(spec, 2, 3, start=2), a[2:5])
    assert not torch.equal(gen_heldout(spec, 2, 5), a)
    assert not torch.equal(gen_synthetic(SyntheticDatasetSpec(seed=1), 2, 5), a)


@pytest.mark.parametrize("spec", [SyntheticDatasetSpec(), MICRO_DATA, SyntheticDatasetSpec(h=4, w=4, d=2)])
def test_class_means_are_separated(spec):
    assert verify_separation(spec) >= 4 * spec.noise_std


def test_separation_failure_raises():
    with pytest.raises(ValueError):
        verify_separation(SyntheticDatasetSpec(noise_std=10.0))


def test_sample_noise_level():
    spec = SyntheticDatasetSpec()
    x = gen_synthetic(spec, 4, 400).double() - torch.from_numpy(class_mean(spec, 4))
    assert float(x.std()) == pytest.approx(spec.noise_std, rel=0.02)


def test_invalid_class():
    with pytest.raises(ValueError):
        gen_synthetic(MICRO_DATA, 3, 1)


def test_ema_examples():
    ema, p = {"w": torch.zeros(3)}, {"w": torch.ones(3)}
    assert torch.equal(ema_update(ema, p, 1.0)["w"], ema["w"])
    assert torch.equal(ema_update(ema, p, 0.0)["w"], p["w"])
    with pytest.raises(ValueError):
        ema_update(ema, {"w": torch.ones(2)}, 0.5)


@pytest.mark.parametrize("decay", [0.5, 0.9, 0.999])
def test_ema_geometric_convergence(f64, decay):
    e0, p = torch.tensor([4.0, -2.0]), torch.tensor([1.0, 1.0])
    ema = {"w": e0}
    for k in range(1, 51):
        ema = ema_update(ema, {"w": p}, decay)
        assert torch.allclose(ema["w"] - p, decay ** k * (e0 - p), rtol=1e-10, atol=1e-14)


def test_default_learning_rates():
    assert default_lr("finetune-mrar", 64) == REFERENCE_FINETUNE_LR == 5.0e-5
    assert default_lr("pretrain-1step", 2048) == 8.0e-4
    assert default_lr("pretrain-1step", 64) == pytest.approx(8.0e-4 * 64 / 2048)
    assert TrainConfig(lr=1e-3).effective_lr == 1e-3


def test_draw_batch_is_keyed_by_step():
    pool = build_pool(MICRO_DATA, 8)
    cfg = TrainConfig(phase="finetune-mrar", batch_size=4)
    a, b = draw_batch(pool, cfg, MICRO, 3), draw_batch(pool, cfg, MICRO, 3)
    assert torch.equal(a.latents, b.latents) and torch.equal(a.t, b.t)
    seen = {draw_batch(pool, cfg, MICRO, s).n_refs for s in range(40)}
    assert seen == {0, 1, 2}
    pre = draw_batch(pool, TrainConfig(batch_size=4), MICRO, 3)
    assert pre.n_refs == 0
    # every sequence is drawn from a single class
    x = draw_batch(pool, cfg, MICRO, 7)
    for b in range(4):
        for img in x.latents[b]:
            assert any(torch.equal(img, row) for row in pool[x.class_ids[b]])


def test_zero_steps_returns_initialisation():
    result = train(TrainConfig(steps=0), MICRO, MICRO_DATA)
    init = build_model(MICRO, 0).state_dict()
    assert result.losses == []
    assert all(torch.equal(result.checkpoint.params[k], init[k]) for k in init)


def test_micro_training_reduces_loss():
    result = train(TrainConfig(steps=500, batch_size=32, lr=2e-3, ema_decay=0.99), MICRO, MICRO_DATA)
    loss = smooth([r["loss"] for r in result.losses], 50)
    assert loss[-1] < loss[0]
    assert loss[-1] < 0.8 * loss[49]


def test_finetune_requires_pretrain_checkpoint():
    with pytest.raises(ValueError, match="requires"):
        train(TrainConfig(phase="finetune-mrar", steps=1), MICRO, MICRO_DATA)


def test_finetune_from_pretrain():
    pre = train(TrainConfig(steps=3, batch_size=4), MICRO, MICRO_DATA)
    ft = train(TrainConfig(phase="finetune-mrar", steps=6, batch_size=4), MICRO, MICRO_DATA, init=pre.checkpoint)
    assert ft.checkpoint.meta["phase"] == "finetune-mrar"
    assert len(ft.losses) == 6 and {r["phase"] for r in ft.losses} == {"finetune-mrar"}


def test_geometry_mismatch():
    with pytest.raises(ValueError):
        train(TrainConfig(steps=1), MICRO, SyntheticDatasetSpec(n_classes=3))


def test_non_finite_loss_aborts():
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        train(TrainConfig(steps=3, batch_size=4, lr=1e30, grad_clip=0.0), MICRO, MICRO_DATA)


def test_loss_csv_round_trip(tmp_path):
    rows = [{"step": 0, "phase": "pretrain-1step", "loss": 1.25, "n_refs": 0, "lr": 1e-3},
            {"step": 1, "phase": "pretrain-1step", "loss": 0.5, "n_refs": 0, "lr": 1e-3}]
    path = tmp_path / "loss.csv"
    write_loss_csv(rows, path)
    assert path.read_text().splitlines()[0] == "step,phase,loss,n_refs,lr"
    assert read_loss_csv(path) == rows


def test_periodic_checkpoints(tmp_path):
    train(TrainConfig(steps=4, batch_size=4, checkpoint_every=2), MICRO, MICRO_DATA, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["pretrain-1step-000002.tdif", "pretrain-1step-000004.tdif"]
