import struct
import zlib

import numpy as np
import pytest
import torch

from transdiff import checkpoint as ckpt_io
from transdiff.config import ConfigError, dump_config, load_config, parse_config
from transdiff.data import SyntheticDatasetSpec
from transdiff.export import load_raw, read_pgm, save_pgm, save_raw
from transdiff.model import preset
from transdiff.training import TrainConfig, model_from_checkpoint, train

MICRO = preset("micro")
MICRO_DATA = SyntheticDatasetSpec(n_classes=3, h=4, w=4, d=2)


@pytest.fixture(scope="module")
def trained():
    return train(TrainConfig(steps=5, batch_size=4), MICRO, MICRO_DATA).checkpoint


def test_checkpoint_round_trip_bitwise(trained, tmp_path):
    path = tmp_path / "a.tdif"
    ckpt_io.save(trained, path)
    back = ckpt_io.load(path)
    assert back.step == 5 and back.model_config == MICRO and back.meta == trained.meta
    for group in ("params", "ema", "optimizer"):
        a, b = getattr(trained, group), getattr(back, group)
        assert a.keys() == b.keys() and len(a) > 0
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert ckpt_io.to_bytes(back) == path.read_bytes()


def test_checkpoint_version_mismatch(trained):
    blob = bytearray(ckpt_io.to_bytes(trained))
    blob[4:8] = struct.pack("<I", 99)
    body = bytes(blob[:-4])
    blob[-4:] = struct.pack("<I", zlib.crc32(body))
    with pytest.raises(ckpt_io.CheckpointError, match="version 99"):
        ckpt_io.from_bytes(bytes(blob))


def test_checkpoint_corruption_detected(trained):
    blob = bytearray(ckpt_io.to_bytes(trained))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(ckpt_io.CheckpointError, match="checksum"):
        ckpt_io.from_bytes(bytes(blob))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.from_bytes(b"nope" * 10)


def test_model_from_checkpoint_picks_weights(trained):
    ema_model = model_from_checkpoint(trained)
    raw_model = model_from_checkpoint(trained, use_ema=False)
    assert torch.equal(ema_model.class_emb, trained.ema["class_emb"])
    assert torch.equal(raw_model.class_emb, trained.params["class_emb"])


def test_resume_continues_loss_curve(tmp_path):
    cfg = TrainConfig(steps=12, batch_size=8, lr=3e-3)
    full = train(cfg, MICRO, MICRO_DATA)
    half = train(TrainConfig(**{**cfg.__dict__, "steps": 6}), MICRO, MICRO_DATA)
    ckpt_io.save(half.checkpoint, tmp_path / "half.tdif")
    resumed = train(cfg, MICRO, MICRO_DATA, init=ckpt_io.load(tmp_path / "half.tdif"))
    assert [r["step"] for r in resumed.losses] == list(range(6, 12))
    for a, b in zip(full.losses[6:], resumed.losses):
        assert abs(a["loss"] - b["loss"]) <= 1e-5 * abs(a["loss"])


CONFIG = """
[model]
preset = micro
enc_depth = 2

[data]
n_classes = 3
h = 4
w = 4
d = 2

[train]
lr = auto
steps = 10

[sampler]
mode = sde
s2 = 0.5
"""


def test_config_parse():
    run = parse_config(CONFIG)
    assert run.model == preset("micro", enc_depth=2)
    assert run.train.lr is None and run.train.steps == 10
    assert run.sampler.mode == "sde" and run.sampler.s2 == 0.5
    assert run.data.n_classes == 3
    assert parse_config(dump_config(run)) == run


def test_config_defaults(tmp_path):
    assert load_config(None) == parse_config("")
    path = tmp_path / "run.ini"
    path.write_text("[sampler]\nsteps = 7\n")
    assert load_config(path).sampler.steps == 7


@pytest.mark.parametrize("text,match", [
    ("[train]\nlearning_rate = 1\n", "unknown key train.learning_rate"),
    ("[optimizer]\nlr = 1\n", "unknown section"),
    ("[train]\nsteps = many\n", "cannot parse"),
    ("[model]\npreset = giant\n", "unknown preset"),
    ("[sampler]\nmode = fast\n", "mode"),
    ("steps = 3\n", "no section headers"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_raw_export_round_trip(tmp_path, dtype):
    x = torch.randn(3, 16, 2, dtype=dtype)
    save_raw(x, tmp_path / "x.tdlt")
    blob = (tmp_path / "x.tdlt").read_bytes()
    assert blob[:4] == b"TDLT" and blob[5] == 3
    back = load_raw(tmp_path / "x.tdlt")
    assert back.dtype == dtype and torch.equal(back, x)


def test_pgm_export(tmp_path):
    x = torch.arange(2 * 16 * 2, dtype=torch.float32).reshape(2, 16, 2)
    save_pgm(x, 4, 4, tmp_path / "x.pgm")
    img = read_pgm(tmp_path / "x.pgm")
    assert img.shape == (4, 9)
    assert img[:, 4].max() == 0  # separator column
    assert img[0, 0] == 0 and img[3, 8] == 255
    assert np.all(np.diff(img[:, :4].astype(int), axis=1) > 0)
