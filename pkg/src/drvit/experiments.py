"""Desk-scale experiment recipe with an on-disk checkpoint cache.

The acceptance suite and the scripts in ``scripts/`` share this so that a model
trained once (for a given recipe, fusion mode, seed and position-embedding
flag) is reused rather than retrained. A cached run is reused only when the
``config.txt`` stored next to it matches the current recipe exactly.
"""
from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Callable

from .config import dump_kv
from .data import Dataset, ShapeSpec, gen_shapes
from .eval import EvalReport, EvalSuite, build_suite, evaluate
from .train import TrainConfig, pretrain_vq, train_vit
from .vit import PIXEL_CENTER, ViTConfig, ViTModel, load_vit
from .vq import VQConfig, VqVae, file_sha256, load_vq


def _vq_train() -> TrainConfig:
    return TrainConfig(lr=1e-3, warmup_steps=100, total_steps=2000, batch_size=64, weight_decay=0.05,
                       eval_every=100)


def _vit_train() -> TrainConfig:
    return TrainConfig(lr=1e-3, warmup_steps=100, total_steps=3000, batch_size=64, weight_decay=0.05)


@dataclass
class DataSizes:
    n_vq: int = 5000
    n_train: int = 20000
    train_seed: int = 0
    n_eval: int = 1000
    eval_seed: int = 1


@dataclass
class DeskRecipe:
    shape: ShapeSpec = field(default_factory=ShapeSpec)
    sizes: DataSizes = field(default_factory=DataSizes)
    vq: VQConfig = field(default_factory=VQConfig)
    vq_train: TrainConfig = field(default_factory=_vq_train)
    vit: ViTConfig = field(default_factory=ViTConfig)
    vit_train: TrainConfig = field(default_factory=_vit_train)

    def vq_text(self) -> str:
        return dump_kv({"shape": self.shape, "data": self.sizes, "vq": self.vq, "train": self.vq_train})

    def vit_config(self, fusion: str, use_pos_emb: bool = True) -> ViTConfig:
        return dataclasses.replace(self.vit, fusion=fusion, use_pos_emb=use_pos_emb)

    def vit_text(self, cfg: ViTConfig, seed: int) -> str:
        tc = dataclasses.replace(self.vit_train, seed=seed)
        # model code behaviour that is not part of ViTConfig still has to key the cache
        code = f"model.pixel_center={PIXEL_CENTER!r}\n"
        return dump_kv({"shape": self.shape, "data": self.sizes, "vit": cfg, "train": tc}) + code + (
            self.vq_text() if cfg.uses_discrete else "")


class Workspace:
    """Lazily builds datasets, the VQ model and ViT members under ``root``."""

    def __init__(self, root: str, recipe: DeskRecipe | None = None,
                 log: Callable[[str], None] | None = None):
        self.root = os.path.abspath(root)
        self.recipe = recipe or DeskRecipe()
        self.log = log
        self._data: dict[str, Dataset] = {}
        self._suite: EvalSuite | None = None
        self._vq: VqVae | None = None
        os.makedirs(self.root, exist_ok=True)

    # -- data -------------------------------------------------------------------------

    def dataset(self, name: str) -> Dataset:
        if name not in self._data:
            r, s = self.recipe, self.recipe.sizes
            n = s.n_vq if name == "vq" else s.n_train
            self._data[name] = gen_shapes(r.shape, n, s.train_seed, "iid_random", "train")
        return self._data[name]

    def suite(self) -> EvalSuite:
        if self._suite is None:
            s = self.recipe.sizes
            self._suite = build_suite(self.recipe.shape, s.n_eval, s.eval_seed)
        return self._suite

    # -- models -------------------------------------------------------------------------

    def _cached(self, sub: str, text: str, ckpt: str) -> str | None:
        d = os.path.join(self.root, sub)
        path = os.path.join(d, ckpt)
        cfg = os.path.join(d, "config.txt")
        if os.path.exists(path) and os.path.exists(cfg):
            with open(cfg, encoding="utf-8") as fh:
                if fh.read() == text:
                    return path
        return None

    def _stamp(self, sub: str, text: str, seconds: float) -> None:
        with open(os.path.join(self.root, sub, "seconds.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"{seconds:.1f}\n")
        # written last: its presence marks a finished run
        with open(os.path.join(self.root, sub, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)

    def train_seconds(self, sub: str) -> float | None:
        """Wall time of the run that produced a cached member, if recorded."""
        try:
            with open(os.path.join(self.root, sub, "seconds.txt"), encoding="utf-8") as fh:
                return float(fh.read())
        except (OSError, ValueError):
            return None

    def vq_path(self) -> str:
        return os.path.join(self.root, "vq", "vq.ckpt")

    def vq(self) -> VqVae:
        if self._vq is None:
            text = self.recipe.vq_text()
            path = self._cached("vq", text, "vq.ckpt")
            if path is None:
                out = os.path.join(self.root, "vq")
                data = self.dataset("vq")
                start = time.perf_counter()
                run = pretrain_vq(data, self.recipe.vq, self.recipe.vq_train, out, self.log)
                seconds = time.perf_counter() - start
                keys = list(run.history)
                with open(os.path.join(out, "vq_history.csv"), "w", encoding="utf-8") as fh:
                    fh.write(",".join(["step"] + keys) + "\n")
                    for i, vals in enumerate(zip(*(run.history[k] for k in keys)), 1):
                        fh.write(",".join([str(i)] + [repr(float(v)) for v in vals]) + "\n")
                self._stamp("vq", text, seconds)
                path = self.vq_path()
            self._vq = load_vq(path)
        return self._vq

    def vq_history(self) -> dict[str, list[float]]:
        """Per-step training losses of the cached VQ run (index 0 is step 1)."""
        self.vq()
        with open(os.path.join(self.root, "vq", "vq_history.csv"), encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")[1:]
            rows = [line.strip().split(",")[1:] for line in fh if line.strip()]
        return {k: [float(r[i]) for r in rows] for i, k in enumerate(header)}

    def member_dir(self, fusion: str, seed: int, use_pos_emb: bool = True) -> str:
        return f"vit_{fusion}_s{seed}" + ("" if use_pos_emb else "_nopos")

    def vit(self, fusion: str, seed: int, use_pos_emb: bool = True) -> tuple[ViTModel, str]:
        """Trained (or cached) member and the path of its checkpoint."""
        cfg = self.recipe.vit_config(fusion, use_pos_emb)
        sub = self.member_dir(fusion, seed, use_pos_emb)
        text = self.recipe.vit_text(cfg, seed)
        path = self._cached(sub, text, "vit.ckpt")
        if path is None:
            vq = self.vq() if cfg.uses_discrete else None
            tc = dataclasses.replace(self.recipe.vit_train, seed=seed)
            out = os.path.join(self.root, sub)
            data, val = self.dataset("train"), self.suite().clean
            start = time.perf_counter()
            train_vit(data, val, vq, cfg, tc, out, self.vq_path() if vq is not None else None, self.log)
            self._stamp(sub, text, time.perf_counter() - start)
            path = os.path.join(out, "vit.ckpt")
        return load_vit(path), path


TREND_CELL = ("texture_swap", 3)


def score(ws: Workspace, fusion: str, seed: int, use_pos_emb: bool = True,
          full_grid: bool = False) -> EvalReport:
    """Clean and held-out top-1 plus texture_swap-3 (or every corruption cell)."""
    model, path = ws.vit(fusion, seed, use_pos_emb)
    suite = ws.suite()
    cells = suite.cells if full_grid else [TREND_CELL]
    return evaluate(model, suite, file_sha256(path), cells=cells)


def accuracy(report: EvalReport, name: str) -> float:
    """Top-1 for ``clean``/``held_out`` or a ``kind_severity`` corruption cell."""
    if name in report.top1:
        return report.top1[name]
    kind, sev = name.rsplit("_", 1)
    return 1.0 - report.errors[(kind, int(sev))] / 100.0
