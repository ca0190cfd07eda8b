"""Command-line entry point: ``python -m drvit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Sequence

from . import config as C
from .data import CORRUPTION_KINDS, ShapeSpec, gen_shapes, load_dataset, save_dataset
from .train import TrainConfig, pretrain_vq, train_vit
from .vit import ViTConfig, ViTModel, attention_rollout, load_vit
from .vq import VQConfig, file_sha256, load_vq

SUBCOMMANDS = ("gen-data", "pretrain-vq", "train-vit", "eval", "ablate", "sweep", "rollout",
               "reconstruct")


@dataclass
class DataConfig:
    n_train: int = 20000
    n_val: int = 1000
    n_held_out: int = 1000
    seed: int = 0


@dataclass
class EvalConfig:
    n_eval: int = 1000
    seed: int = 1
    pool_size: int = 1000
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)


SECTIONS = {"shape": ShapeSpec, "data": DataConfig, "vq": VQConfig, "vit": ViTConfig,
            "train": TrainConfig, "eval": EvalConfig}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="overrides train.seed (data.seed for gen-data)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--force", action="store_true", help="allow overwriting existing outputs")

    p = _Parser(prog="drvit", description="Discrete-token ViT pipeline on synthetic shapes.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train/val/held-out DSET files")
    sub.add_parser("pretrain-vq", parents=[common], help="fit the VQ autoencoder")
    sub.add_parser("train-vit", parents=[common], help="train a ViT classifier")
    e = sub.add_parser("eval", parents=[common], help="top-1 and corruption grid for a checkpoint")
    e.add_argument("--checkpoint", required=True, metavar="PATH")
    e.add_argument("--baseline", metavar="PATH", help="pixel_only twin for mCE normalisation")
    a = sub.add_parser("ablate", parents=[common], help="position-embedding ablation")
    a.add_argument("--checkpoint", required=True, metavar="PATH")
    a.add_argument("--twin", metavar="PATH", help="twin trained without position embeddings")
    s = sub.add_parser("sweep", parents=[common], help="train and evaluate along one axis")
    s.add_argument("--axis", required=True, choices=("codebook_size", "pixel_dim", "fusion_mode"))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--baseline", metavar="PATH", help="pixel_only checkpoint for mCE")
    r = sub.add_parser("rollout", parents=[common], help="attention-rollout heatmaps as PGM")
    r.add_argument("--checkpoint", required=True, metavar="PATH")
    r.add_argument("--data", required=True, metavar="DSET")
    r.add_argument("--count", type=int, default=8)
    c = sub.add_parser("reconstruct", parents=[common], help="original | reconstruction as PPM")
    c.add_argument("--vq", required=True, metavar="PATH")
    c.add_argument("--data", required=True, metavar="DSET")
    c.add_argument("--count", type=int, default=8)
    return p


def resolve_config(args) -> dict:
    """Defaults < config file < --seed < --set."""
    values: dict[str, str] = {}
    if args.config:
        values.update(C.load_kv(args.config))
    if args.seed is not None:
        values["data.seed" if args.command == "gen-data" else "train.seed"] = str(args.seed)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    by_section = C.split_sections(values, SECTIONS)
    return {name: C.coerce_dataclass(cls, by_section[name]) for name, cls in SECTIONS.items()}


class _Outputs:
    """Guards an output directory against silent overwrites."""

    def __init__(self, root: str, force: bool):
        self.root = root
        self.force = force
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.root, name)
        if os.path.exists(p) and not self.force:
            raise FileExistsError(f"refusing to overwrite {p} (pass --force)")
        return p

    def write(self, name: str, raw: bytes) -> str:
        p = self.path(name)
        with open(p, "wb") as fh:
            fh.write(raw)
        return p


def _echo_config(out: _Outputs, cfg: dict, names: Sequence[str]) -> None:
    out.write("config.txt", C.dump_kv({n: cfg[n] for n in names}).encode("utf-8"))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _require(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"{what} is not set")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} {path!r} does not exist")
    return path


# -- subcommands ------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: _Outputs) -> None:
    spec, dc = cfg["shape"], cfg["data"]
    targets = ["train.dset", "val.dset", "held_out.dset", "config.txt"]
    for t in targets:
        out.path(t)
    save_dataset(gen_shapes(spec, dc.n_train, dc.seed, "iid_random", "train"), out.path("train.dset"))
    save_dataset(gen_shapes(spec, dc.n_val, dc.seed + 1, "iid_random", "val"), out.path("val.dset"))
    save_dataset(gen_shapes(spec, dc.n_held_out, dc.seed + 2, "held_out", "held_out"),
                 out.path("held_out.dset"))
    _echo_config(out, cfg, ["shape", "data"])


def cmd_pretrain_vq(args, cfg, out: _Outputs) -> None:
    tc = cfg["train"]
    ds = load_dataset(_require(tc.train_data, "train.train_data"), "train")
    for t in ("vq.ckpt", "vq_metrics.csv", "config.txt"):
        out.path(t)
    _echo_config(out, cfg, ["vq", "train"])
    pretrain_vq(ds, cfg["vq"], tc, out.root, _log)


def _load_vq_for(vit_cfg: ViTConfig, tc: TrainConfig):
    if not vit_cfg.uses_discrete:
        return None, None
    path = _require(tc.vq_checkpoint, "train.vq_checkpoint")
    return load_vq(path), path


def cmd_train_vit(args, cfg, out: _Outputs) -> None:
    tc, vit_cfg = cfg["train"], cfg["vit"]
    ds = load_dataset(_require(tc.train_data, "train.train_data"), "train")
    val = load_dataset(tc.val_data, "val") if tc.val_data else None
    vq, vq_path = _load_vq_for(vit_cfg, tc)
    for t in ("vit.ckpt", "vit_metrics.csv", "config.txt"):
        out.path(t)
    _echo_config(out, cfg, ["vit", "train"])
    train_vit(ds, val, vq, vit_cfg, tc, out.root, vq_path, _log)


def _suite(cfg):
    from .eval import build_suite

    ec = cfg["eval"]
    return build_suite(cfg["shape"], ec.n_eval, ec.seed, ec.kinds, ec.severities, ec.pool_size)


def cmd_eval(args, cfg, out: _Outputs) -> None:
    from .eval import evaluate

    target = out.path("eval_report.csv")
    suite = _suite(cfg)
    baseline = None
    if args.baseline:
        base_model = load_vit(args.baseline)
        if base_model.config.fusion != "pixel_only":
            raise ValueError("the mCE baseline must be a pixel_only checkpoint")
        baseline = evaluate(base_model, suite, file_sha256(args.baseline))
    report = evaluate(load_vit(args.checkpoint), suite, file_sha256(args.checkpoint), baseline)
    report.write_csv(target)
    _echo_config(out, cfg, ["shape", "eval"])
    _log(" ".join(f"{k}={v:.4f}" for k, v in report.top1.items())
         + (f" mCE={report.mce:.2f}" if report.mce is not None else ""))


def _twin_trainer(cfg, out: _Outputs, name: str):
    tc = cfg["train"]

    def train(vit_cfg: ViTConfig) -> ViTModel:
        ds = load_dataset(_require(tc.train_data, "train.train_data"), "train")
        vq, vq_path = _load_vq_for(vit_cfg, tc)
        sub = os.path.join(out.root, name)
        os.makedirs(sub, exist_ok=True)
        return train_vit(ds, None, vq, vit_cfg, tc, sub, vq_path, _log).model

    return train


def cmd_ablate(args, cfg, out: _Outputs) -> None:
    from .eval import pos_emb_ablation, write_ablation_csv

    target = out.path("ablation.csv")
    model = load_vit(args.checkpoint)
    twin = load_vit(args.twin) if args.twin else None
    twin_path = args.twin
    if twin is None:
        out.path(os.path.join("twin", "vit.ckpt"))
    results = pos_emb_ablation(model, _suite(cfg), twin, _twin_trainer(cfg, out, "twin"))
    if twin_path is None:
        twin_path = os.path.join(out.root, "twin", "vit.ckpt")
    write_ablation_csv(target, results, file_sha256(args.checkpoint), file_sha256(twin_path))
    _echo_config(out, cfg, ["shape", "train", "eval"])
    for r in results:
        _log(f"{r.dataset}: with={r.with_value:.4f} without={r.without_value:.4f} "
             f"drop={r.relative_drop:.2f}%")


def cmd_sweep(args, cfg, out: _Outputs) -> int:
    from .data import load_dataset as _load
    from .eval import evaluate, sweep, write_sweep_csv

    target = out.path("sweep.csv")
    tc, base = cfg["train"], cfg["vit"]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    suite = _suite(cfg)
    ds = _load(_require(tc.train_data, "train.train_data"), "train")

    def member(vit_cfg: ViTConfig, k: int | None):
        tag = f"{args.axis}_{k if k is not None else vit_cfg.fusion + '_' + str(vit_cfg.pixel_dim)}"
        sub = os.path.join(out.root, tag)
        os.makedirs(sub, exist_ok=True)
        vq, vq_path = None, None
        if k is not None:
            vq_cfg = VQConfig(**{**cfg["vq"].__dict__, "codebook_size": k})
            vq = pretrain_vq(ds, vq_cfg, tc, sub, _log).model
            vq_path = os.path.join(sub, "vq.ckpt")
        elif vit_cfg.uses_discrete:
            vq, vq_path = _load_vq_for(vit_cfg, tc)
        run = train_vit(ds, None, vq if vit_cfg.uses_discrete else None, vit_cfg, tc, sub, vq_path, _log)
        return run.model, file_sha256(run.checkpoint)

    baseline = None
    if args.baseline:
        baseline = evaluate(load_vit(args.baseline), suite, file_sha256(args.baseline))
    rows = sweep(args.axis, values, base, suite, member, baseline, log=_log)
    write_sweep_csv(target, rows)
    _echo_config(out, cfg, ["shape", "vq", "vit", "train", "eval"])
    return 0 if all(r.status == "ok" for r in rows) else 2


def cmd_rollout(args, cfg, out: _Outputs) -> None:
    from .eval import heatmap_image, pgm_bytes, ppm_bytes

    model = load_vit(args.checkpoint)
    ds = load_dataset(args.data)
    n = min(args.count, len(ds))
    names = [f"rollout_{i:04d}.pgm" for i in range(n)] + [f"input_{i:04d}.ppm" for i in range(n)]
    for name in names:
        out.path(name)
    p = model.config.patch_size
    for i in range(n):
        x = ds.images[i : i + 1]
        _, record = model(x, record_attention=True)
        grid = attention_rollout(record, model.config.grid)[0]
        out.write(f"rollout_{i:04d}.pgm", pgm_bytes(heatmap_image(grid, p)))
        out.write(f"input_{i:04d}.ppm", ppm_bytes(ds.images[i]))


def cmd_reconstruct(args, cfg, out: _Outputs) -> None:
    from .eval import ppm_bytes, side_by_side

    vq = load_vq(args.vq)
    ds = load_dataset(args.data)
    n = min(args.count, len(ds))
    for i in range(n):
        out.path(f"recon_{i:04d}.ppm")
    recon = vq.reconstruct(ds.images[:n])
    for i in range(n):
        out.write(f"recon_{i:04d}.ppm", ppm_bytes(side_by_side(ds.images[i], recon[i])))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-vq": cmd_pretrain_vq,
    "train-vit": cmd_train_vit,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "rollout": cmd_rollout,
    "reconstruct": cmd_reconstruct,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "drvit: error: a subcommand is required")
        cfg = resolve_config(args)
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    except (UsageError, C.ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        code = COMMANDS[args.command](args, cfg, _Outputs(args.out, args.force))
    except UsageError as exc:
        print(f"drvit {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"drvit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return code or 0


def main() -> None:
    sys.exit(run())
