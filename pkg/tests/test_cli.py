import hashlib
import os

import pytest

from drvit import cli
from drvit.eval import read_pnm

SMALL = ["--set", "data.n_train=128", "--set", "data.n_val=32", "--set", "data.n_held_out=32"]
EVAL = ["--set", "eval.n_eval=32", "--set", "eval.pool_size=16",
        "--set", "eval.kinds=contrast,texture_swap", "--set", "eval.severities=1,3"]


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys, tmp_path):
    assert cli.run([]) == 1
    assert cli.run(["frobnicate"]) == 1
    assert cli.run(["gen-data", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "nosection=1"]) == 1
    assert cli.run(["gen-data", "--out", str(tmp_path), "--set", "data.n_train=abc"]) == 1


def test_missing_input_is_runtime_failure(tmp_path):
    code = cli.run(["pretrain-vq", "--out", str(tmp_path), "--set", f"train.train_data={tmp_path}/none.dset"])
    assert code == 2


def test_gen_data_is_deterministic_and_guarded(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(["gen-data", "--out", str(a), "--seed", "3"] + SMALL) == 0
    assert cli.run(["gen-data", "--out", str(b), "--seed", "3"] + SMALL) == 0
    for name in ("train.dset", "val.dset", "held_out.dset", "config.txt"):
        assert digest(a / name) == digest(b / name)
    assert "data.seed=3" in (a / "config.txt").read_text()
    # refuses to overwrite without --force
    assert cli.run(["gen-data", "--out", str(a), "--seed", "3"] + SMALL) == 2
    assert cli.run(["gen-data", "--out", str(a), "--seed", "3", "--force"] + SMALL) == 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("train.lr = 0.01\ntrain.seed = 4\nvit.depth = 2\n")
    parser = cli._parser()
    args = parser.parse_args(["train-vit", "--config", str(cfg), "--seed", "9", "--set", "vit.depth=3"])
    resolved = cli.resolve_config(args)
    assert resolved["train"].lr == 0.01
    assert resolved["train"].seed == 9
    assert resolved["vit"].depth == 3
    assert resolved["vit"].hidden_dim == 64  # built-in default


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path):
    d = str(tmp_path / "data")
    assert cli.run(["gen-data", "--out", d] + SMALL) == 0
    vq = str(tmp_path / "vq")
    train = ["--set", f"train.train_data={d}/train.dset", "--set", "train.batch_size=16",
             "--set", "train.total_steps=50", "--set", "train.warmup_steps=5"]
    assert cli.run(["pretrain-vq", "--out", vq] + train) == 0
    vit = str(tmp_path / "vit")
    assert cli.run(["train-vit", "--out", vit, "--set", "vit.fusion=concat",
                    "--set", f"train.vq_checkpoint={vq}/vq.ckpt",
                    "--set", f"train.val_data={d}/val.dset"] + train) == 0
    base = str(tmp_path / "base")
    assert cli.run(["train-vit", "--out", base, "--set", "vit.fusion=pixel_only"] + train) == 0
    ev = str(tmp_path / "eval")
    assert cli.run(["eval", "--out", ev, "--checkpoint", f"{vit}/vit.ckpt",
                    "--baseline", f"{base}/vit.ckpt"] + EVAL) == 0
    ro = str(tmp_path / "rollout")
    assert cli.run(["rollout", "--out", ro, "--checkpoint", f"{vit}/vit.ckpt",
                    "--data", f"{d}/held_out.dset", "--count", "2"]) == 0
    rc = str(tmp_path / "recon")
    assert cli.run(["reconstruct", "--out", rc, "--vq", f"{vq}/vq.ckpt",
                    "--data", f"{d}/val.dset", "--count", "2"]) == 0
    for path in [f"{vq}/vq.ckpt", f"{vq}/vq_metrics.csv", f"{vit}/vit.ckpt", f"{vit}/vit_metrics.csv",
                 f"{ev}/eval_report.csv", f"{ro}/rollout_0001.pgm", f"{rc}/recon_0001.ppm"]:
        assert os.path.getsize(path) > 0, path
    heat = read_pnm(open(f"{ro}/rollout_0000.pgm", "rb").read())
    assert heat.shape == (32, 32) and heat.max() == 1.0
    assert read_pnm(open(f"{rc}/recon_0000.ppm", "rb").read()).shape == (32, 66, 3)
    assert "mCE" in open(f"{ev}/eval_report.csv").read()
