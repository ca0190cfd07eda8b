"""Adam, warmup-cosine schedule, mixup and the two training drivers.

Stage one fits the VQ autoencoder without labels. Stage two trains a ViT on
top of the frozen VQ encoder while finetuning a copy of its codebook.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .tensor import Tensor
from .vit import ViTConfig, ViTModel
from .vq import VQConfig, VqVae, codebook_perplexity, file_sha256, prior_kl_constant

VQ_COLUMNS = ("step", "epoch", "lr", "loss", "recon", "dict", "commit", "perplexity", "prior_kl")
VIT_COLUMNS = ("step", "epoch", "lr", "loss", "train_acc", "val_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 64
    weight_decay: float = 0.05
    mixup_alpha: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0  # 0: once per epoch
    checkpoint_every: int = 0  # 0: only at the end
    train_data: str = ""
    val_data: str = ""
    vq_checkpoint: str = ""

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps} "
                             f"and {self.total_steps}")
        if self.mixup_alpha < 0:
            raise ValueError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def eval_interval(self, n_train: int) -> int:
        return self.eval_every or max(1, math.ceil(n_train / self.batch_size))


def lr_schedule(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    if warmup >= total:
        raise ValueError(f"warmup ({warmup}) must be smaller than total ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def no_decay(name: str) -> bool:
    """Layer-norm params, biases, the class token and position embeddings skip decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "scale", "shift", "cls_token", "pos_emb")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, lr: float,
              weight_decay: float | None = None, decay_mask: Callable[[str], bool] = no_decay) -> None:
    """One Adam update with decoupled weight decay; gradients are zeroed afterwards.

    Parameters with no gradient are treated as having a zero gradient. All
    gradients are checked before anything is modified.
    """
    wd = state.weight_decay if weight_decay is None else weight_decay
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise T.NonFiniteError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and not decay_mask(name):
            p.data -= lr * wd * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def mixup(images: np.ndarray, labels_onehot: np.ndarray, alpha: float, rng: np.random.Generator,
          lam: float | None = None, perm: np.ndarray | None = None):
    """Blend each example with a partner from a random in-batch permutation.

    Returns ``(images, labels, lam, perm)``. ``alpha == 0`` (and no forced
    ``lam``) leaves the batch untouched.
    """
    if alpha < 0:
        raise ValueError(f"mixup alpha must be >= 0, got {alpha}")
    n = images.shape[0]
    if alpha == 0 and lam is None:
        return images, labels_onehot, 1.0, np.arange(n)
    if n < 2:
        raise ValueError("mixup needs a batch of at least 2 examples")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(n)
    x = lam * images + (1.0 - lam) * images[perm]
    y = lam * labels_onehot + (1.0 - lam) * labels_onehot[perm]
    return x, y, lam, perm


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class _Batches:
    """Epoch-wise shuffled minibatches; the final partial batch is dropped."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if n < batch:
            batch = n
        self.n, self.batch, self.rng = n, batch, rng
        self.epoch = 0
        self._order = self.rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch > self.n:
            self.epoch += 1
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return idx


class _CsvLog:
    def __init__(self, path: str | None, columns):
        self.columns = columns
        self.rows: list[dict] = []
        self._path = path
        if path:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._path:
            with open(self._path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _atomic_write(path: str, raw: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, path)


@dataclass
class VQRun:
    model: VqVae
    history: dict[str, list[float]]  # per-step recon/dict/commit/loss
    rows: list[dict]
    checkpoint: str | None = None


def pretrain_vq(dataset: Dataset, vq_config: VQConfig, train_config: TrainConfig,
                out_dir: str | None = None, log: Callable[[str], None] | None = None) -> VQRun:
    """Fit encoder, codebook and decoder on unlabeled images.

    Writes ``vq.ckpt`` and ``vq_metrics.csv`` into ``out_dir`` when given. A
    NaN loss aborts with the last checkpoint written so far left in place.
    """
    from .vq import vq_checkpoint_bytes

    tc = train_config
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng([tc.seed, 0])
    model = VqVae(vq_config, rng)
    batches = _Batches(len(dataset), tc.batch_size, np.random.default_rng([tc.seed, 1]))
    params = list(model.named_parameters())
    state = AdamState(tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    ckpt = os.path.join(out_dir, "vq.ckpt") if out_dir else None
    csv_log = _CsvLog(os.path.join(out_dir, "vq_metrics.csv") if out_dir else None, VQ_COLUMNS)
    history = {k: [] for k in ("loss", "recon", "dict", "commit")}
    interval = tc.eval_interval(len(dataset))
    hist = np.zeros(vq_config.codebook_size)
    window = {k: 0.0 for k in history}
    count = 0
    kl = prior_kl_constant(vq_config.codebook_size)
    for step in range(1, tc.total_steps + 1):
        lr = lr_schedule(step, tc.lr, tc.warmup_steps, tc.total_steps)
        x = dataset.images[batches.next()]
        losses, q = model.loss(x)
        vals = {"loss": losses.total.item(), "recon": losses.recon.item(),
                "dict": losses.dict.item(), "commit": losses.commit.item()}
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingError(f"VQ loss became non-finite at step {step}; "
                                f"last good checkpoint: {ckpt if ckpt and os.path.exists(ckpt) else 'none'}")
        T.backward(losses.total)
        adam_step(params, state, lr)
        for k, v in vals.items():
            history[k].append(v)
            window[k] += v
        hist += np.bincount(q.indices.ravel(), minlength=vq_config.codebook_size)
        count += 1
        if step % interval == 0 or step == tc.total_steps:
            row = {"step": step, "epoch": batches.epoch, "lr": lr,
                   **{k: window[k] / count for k in window},
                   "perplexity": codebook_perplexity(hist), "prior_kl": kl}
            csv_log.write(row)
            if log:
                log(" ".join(f"{k}={_fmt(row[k])}" for k in VQ_COLUMNS))
            hist[:] = 0
            window = {k: 0.0 for k in history}
            count = 0
        if ckpt and ((tc.checkpoint_every and step % tc.checkpoint_every == 0) or step == tc.total_steps):
            _atomic_write(ckpt, vq_checkpoint_bytes(model))
    return VQRun(model, history, csv_log.rows, ckpt)


@dataclass
class ViTRun:
    model: ViTModel
    history: dict[str, list[float]]
    rows: list[dict]
    checkpoint: str | None = None


def _accuracy(model: ViTModel, images: np.ndarray, labels: np.ndarray, codes=None) -> float:
    logits = model.predict_logits(images, codes)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_vit(dataset: Dataset, val_dataset: Dataset | None, vq: VqVae | None, vit_config: ViTConfig,
              train_config: TrainConfig, out_dir: str | None = None, vq_path: str | None = None,
              log: Callable[[str], None] | None = None) -> ViTRun:
    """Train a classifier from scratch on top of an optional frozen VQ model.

    The VQ encoder and decoder never change; the ViT holds its own trainable
    copy of the codebook. Writes ``vit.ckpt`` and ``vit_metrics.csv`` into
    ``out_dir`` when given.
    """
    from .vit import vit_checkpoint_bytes

    tc, cfg = train_config, vit_config
    if cfg.uses_discrete and vq is None:
        raise ValueError(f"fusion {cfg.fusion!r} needs a VQ checkpoint")
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects {cfg.num_classes}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model = ViTModel(cfg, vq if cfg.uses_discrete else None, np.random.default_rng([tc.seed, 0]))
    batches = _Batches(len(dataset), tc.batch_size, np.random.default_rng([tc.seed, 1]))
    mix_rng = np.random.default_rng([tc.seed, 2])
    params = list(model.named_parameters())
    state = AdamState(tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    vq_hash = file_sha256(vq_path) if (cfg.uses_discrete and vq_path) else None
    ckpt = os.path.join(out_dir, "vit.ckpt") if out_dir else None
    csv_log = _CsvLog(os.path.join(out_dir, "vit_metrics.csv") if out_dir else None, VIT_COLUMNS)

    # with mixup off, tokens of the training images never change
    cached = model.discrete_tokens(dataset.images) if (cfg.uses_discrete and tc.mixup_alpha == 0) else None
    val_codes = (model.discrete_tokens(val_dataset.images)
                 if (cfg.uses_discrete and val_dataset is not None) else None)
    interval = tc.eval_interval(len(dataset))
    history = {"loss": [], "train_acc": []}
    loss_sum = acc_sum = 0.0
    count = 0
    for step in range(1, tc.total_steps + 1):
        lr = lr_schedule(step, tc.lr, tc.warmup_steps, tc.total_steps)
        idx = batches.next()
        x = dataset.images[idx]
        y = one_hot(dataset.labels[idx], cfg.num_classes)
        x, y, _, _ = mixup(x, y, tc.mixup_alpha, mix_rng)
        codes = cached[idx] if cached is not None else None
        logits = model(x, codes)
        loss = T.cross_entropy(logits, y)
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingError(f"ViT loss became non-finite at step {step}")
        T.backward(loss)
        adam_step(params, state, lr)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == np.argmax(y, axis=1)))
        history["loss"].append(lv)
        history["train_acc"].append(acc)
        loss_sum += lv
        acc_sum += acc
        count += 1
        if step % interval == 0 or step == tc.total_steps:
            val = (_accuracy(model, val_dataset.images, val_dataset.labels, val_codes)
                   if val_dataset is not None else float("nan"))
            row = {"step": step, "epoch": batches.epoch, "lr": lr, "loss": loss_sum / count,
                   "train_acc": acc_sum / count, "val_acc": val}
            csv_log.write(row)
            if log:
                log(" ".join(f"{k}={_fmt(row[k])}" for k in VIT_COLUMNS))
            loss_sum = acc_sum = 0.0
            count = 0
        if ckpt and ((tc.checkpoint_every and step % tc.checkpoint_every == 0) or step == tc.total_steps):
            _atomic_write(ckpt, vit_checkpoint_bytes(model, vq_path, vq_hash))
    return ViTRun(model, history, csv_log.rows, ckpt)
