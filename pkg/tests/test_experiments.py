import dataclasses
import os

import pytest

from drvit.experiments import TREND_CELL, DataSizes, DeskRecipe, Workspace, accuracy, score
from drvit.train import TrainConfig
from drvit.vit import ViTConfig
from drvit.vq import VQConfig


def tiny_recipe(steps=3):
    train = TrainConfig(lr=1e-3, warmup_steps=1, total_steps=steps, batch_size=8, eval_every=1)
    return DeskRecipe(
        sizes=DataSizes(n_vq=16, n_train=16, n_eval=8),
        vq=VQConfig(codebook_size=4, embed_dim=4, stages=(0, 0, 0), channel_mult=(1, 1, 1), channels=4),
        vq_train=train,
        vit=ViTConfig(depth=1, hidden_dim=16, mlp_dim=16, heads=2, pixel_dim=8, discrete_dim=4),
        vit_train=train)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ws = Workspace(str(tmp_path_factory.mktemp("ws")), tiny_recipe())
    ws.vit("concat", 0)
    return ws


def test_vq_run_is_cached_with_history(trained):
    hist = trained.vq_history()
    assert set(hist) == {"loss", "recon", "dict", "commit"}
    assert len(hist["recon"]) == 3
    assert trained.train_seconds("vq") is not None
    mtime = os.path.getmtime(trained.vq_path())
    again = Workspace(trained.root, tiny_recipe())
    again.vq()
    assert os.path.getmtime(again.vq_path()) == mtime


def test_member_reused_only_for_matching_recipe(trained):
    _, path = trained.vit("concat", 0)
    mtime = os.path.getmtime(path)
    Workspace(trained.root, tiny_recipe()).vit("concat", 0)
    assert os.path.getmtime(path) == mtime
    # a different recipe retrains into the same slot
    other = Workspace(trained.root, tiny_recipe(steps=4))
    other.vit("pixel_only", 0)
    with open(os.path.join(trained.root, "vit_pixel_only_s0", "config.txt")) as fh:
        assert "train.total_steps=4" in fh.read()


def test_member_dirs():
    ws_dir = Workspace.member_dir
    assert ws_dir(None, "concat", 2) == "vit_concat_s2"
    assert ws_dir(None, "pixel_only", 0, False) == "vit_pixel_only_s0_nopos"


def test_score_and_accuracy(trained):
    rep = score(trained, "concat", 0)
    assert set(rep.top1) == {"clean", "held_out"}
    assert list(rep.errors) == [TREND_CELL]
    assert accuracy(rep, "texture_swap_3") == pytest.approx(1.0 - rep.errors[TREND_CELL] / 100.0)
    assert accuracy(rep, "clean") == rep.top1["clean"]


def test_recipe_text_tracks_vq_only_for_discrete_modes():
    r = tiny_recipe()
    changed = dataclasses.replace(r, vq=dataclasses.replace(r.vq, codebook_size=5))
    pix = r.vit_config("pixel_only")
    cat = r.vit_config("concat")
    assert r.vit_text(pix, 0) == changed.vit_text(pix, 0)
    assert r.vit_text(cat, 0) != changed.vit_text(cat, 0)
    assert r.vit_text(cat, 0) != r.vit_text(cat, 1)
