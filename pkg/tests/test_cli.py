import subprocess
import sys

import pytest
import torch

from transdiff.cli import main
from transdiff.export import load_raw, read_pgm
from transdiff.training import read_loss_csv


def kv(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--preset", "micro", "--steps", "20", "--out", str(out / "pre")]) == 0
    assert main(["finetune-mrar", "--init", str(out / "pre" / "pretrain-1step.tdif"),
                 "--steps", "10", "--out", str(out / "ft")]) == 0
    return out


def test_train_outputs(run_dir):
    pre = run_dir / "pre"
    assert (pre / "pretrain-1step.tdif").exists() and (pre / "pretrain-1step_loss.png").exists()
    rows = read_loss_csv(pre / "pretrain-1step_loss.csv")
    assert len(rows) == 20 and {r["n_refs"] for r in rows} == {0}
    ft = read_loss_csv(run_dir / "ft" / "finetune-mrar_loss.csv")
    assert len(ft) == 10 and ft[0]["lr"] == 5e-5


def test_sample(run_dir, capsys):
    ckpt = str(run_dir / "ft" / "finetune-mrar.tdif")
    prefix = run_dir / "samples" / "c1"
    assert main(["sample", "--ckpt", ckpt, "--class", "1", "--paradigm", "mrar", "--refs", "2",
                 "--steps", "3", "--mode", "sde", "--s2", "0.5", "--n", "4", "--out", str(prefix)]) == 0
    out = kv(capsys.readouterr().out)
    assert out["finite"] == "True" and out["paradigm"] == "mrar"
    x = load_raw(prefix.with_suffix(".tdlt"))
    assert x.shape == (4, 16, 2) and bool(torch.isfinite(x).all())
    assert read_pgm(prefix.with_suffix(".pgm")).shape == (4, 19)
    assert prefix.with_suffix(".png").stat().st_size > 0


def test_one_step_sample(run_dir, capsys):
    ckpt = str(run_dir / "pre" / "pretrain-1step.tdif")
    assert main(["sample", "--ckpt", ckpt, "--class", "0", "--steps", "1", "--out", str(run_dir / "s1")]) == 0
    assert kv(capsys.readouterr().out)["finite"] == "True"


def test_fuse(run_dir, capsys):
    ckpt = str(run_dir / "ft" / "finetune-mrar.tdif")
    assert main(["fuse", "--ckpt", ckpt, "--class-a", "0", "--class-b", "2", "--n", "8", "--steps", "3",
                 "--out", str(run_dir / "fused")]) == 0
    out = kv(capsys.readouterr().out)
    assert out["k"] == "2" and {"ratio_a", "ratio_b", "between"} <= out.keys()
    assert (run_dir / "fused.png").exists()


def test_diversity(run_dir, capsys):
    ckpt = str(run_dir / "ft" / "finetune-mrar.tdif")
    assert main(["diversity", "--ckpt", ckpt, "--refs", "2", "--n", "2", "--steps", "2",
                 "--out", str(run_dir / "div")]) == 0
    out = kv(capsys.readouterr().out)
    assert len(out) == 6 and all(0 <= float(v) <= 1 for v in out.values())
    assert (run_dir / "div" / "diversity.csv").read_text().startswith("class,paradigm,diversity\n")
    assert (run_dir / "div" / "diversity.png").exists()


def test_eval(run_dir, capsys):
    ckpt = str(run_dir / "ft" / "finetune-mrar.tdif")
    assert main(["eval", "--ckpt", ckpt, "--n", "16", "--steps", "3", "--baseline", "--out", str(run_dir / "ev")]) == 0
    out = kv(capsys.readouterr().out)
    assert "baseline.sliced_wasserstein.mean" in out and "centroid_accuracy.class2" in out
    header = (run_dir / "ev" / "eval.csv").read_text().splitlines()[0]
    assert header == "class,sliced_wasserstein,centroid_accuracy,baseline_sliced_wasserstein"
    assert (run_dir / "ev" / "eval.png").exists() and (run_dir / "ev" / "eval.txt").exists()


def test_config_file_and_unknown_key(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text("[model]\npreset = micro\n[data]\nn_classes = 3\nh = 4\nw = 4\nd = 2\n[train]\nsteps = 2\nbatch_size = 4\n")
    assert main(["train", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert kv(capsys.readouterr().out)["steps"] == "2"
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nstep = 2\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2
    assert "unknown key train.step" in capsys.readouterr().err


def test_bad_checkpoint(tmp_path, capsys):
    (tmp_path / "x.tdif").write_bytes(b"garbage" * 8)
    assert main(["sample", "--ckpt", str(tmp_path / "x.tdif"), "--class", "0", "--out", str(tmp_path / "s")]) == 2
    assert "not a TDIF checkpoint" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = kv(capsys.readouterr().out)
    assert out["result"] == "pass" and float(out["max_relative_error"]) <= 1e-4


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "transdiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "finetune-mrar", "sample", "fuse", "diversity", "eval", "gradcheck"):
        assert cmd in res.stdout
