"""Top-1, mCE, the robustness suite, ablation harnesses and image writers."""
from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import CORRUPTION_KINDS, CorruptionSpec, Dataset, ShapeSpec, corrupt_dataset, gen_shapes
from .vit import ViTConfig, ViTModel

Cell = tuple[str, int]  # (corruption kind, severity)

REPORT_COLUMNS = ("checkpoint", "config", "dataset", "corruption", "severity", "top1", "error")
ABLATION_COLUMNS = ("dataset", "with_pos_emb", "without_pos_emb", "relative_drop_pct",
                    "checkpoint_with", "checkpoint_without")
SWEEP_COLUMNS = ("axis", "value", "status", "checkpoint", "config", "clean", "held_out",
                 "texture_swap_3", "grayscale_edges_3", "mean_corruption_error", "mce")


def config_fingerprint(cfg: ViTConfig) -> str:
    text = "".join(f"{k}={v}\n" for k, v in cfg.to_items())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def predictions(logits: np.ndarray) -> np.ndarray:
    """argmax over classes; np.argmax already returns the lowest index on ties."""
    return np.argmax(logits, axis=1)


def top1(model, dataset: Dataset, codes: np.ndarray | None = None) -> float:
    """Fraction of examples whose argmax logit equals the label.

    ``model`` is a :class:`ViTModel` or any callable mapping an image batch to
    logits.
    """
    if isinstance(model, ViTModel):
        if model.config.num_classes != dataset.num_classes:
            raise ValueError(f"model predicts {model.config.num_classes} classes, "
                             f"dataset has {dataset.num_classes}")
        logits = model.predict_logits(dataset.images, codes)
    else:
        logits = np.asarray(model(dataset.images))
        if logits.shape != (len(dataset), dataset.num_classes):
            raise ValueError(f"logits shape {logits.shape} does not match dataset "
                             f"({len(dataset)}, {dataset.num_classes})")
    return float(np.mean(predictions(logits) == dataset.labels))


def mce(model_errors: Mapping[Cell, float], baseline_errors: Mapping[Cell, float]) -> float:
    """100 x mean over kinds of sum_s E_{k,s} / sum_s E^base_{k,s}."""
    if set(model_errors) != set(baseline_errors):
        raise ValueError("mce: model and baseline grids cover different (kind, severity) cells")
    if not model_errors:
        raise ValueError("mce: empty error grid")
    kinds = sorted({k for k, _ in model_errors})
    ratios = []
    for kind in kinds:
        cells = [c for c in model_errors if c[0] == kind]
        base = sum(baseline_errors[c] for c in cells)
        if base <= 0:
            raise ValueError(f"mce: baseline error sum is zero for {kind!r}")
        ratios.append(sum(model_errors[c] for c in cells) / base)
    return 100.0 * float(np.mean(ratios))


@dataclass
class EvalSuite:
    """Fixed evaluation data: clean and held-out-texture splits plus a corruption pool."""

    shape_spec: ShapeSpec
    clean: Dataset
    held_out: Dataset
    pool: Dataset  # first images of ``clean``, corrupted cell by cell
    cells: list[Cell]
    seed: int

    def corrupted(self, cell: Cell) -> Dataset:
        return corrupt_dataset(self.pool, CorruptionSpec(*cell), self.seed, self.shape_spec)


def build_suite(shape_spec: ShapeSpec, n_eval: int = 1000, seed: int = 1,
                kinds: Iterable[str] = CORRUPTION_KINDS, severities: Iterable[int] = (1, 2, 3, 4, 5),
                pool_size: int = 1000) -> EvalSuite:
    clean = gen_shapes(shape_spec, n_eval, seed, "iid_random", "clean")
    held = gen_shapes(shape_spec, n_eval, seed, "held_out", "held_out")
    pool = clean.subset(np.arange(min(pool_size, n_eval)))
    cells = [(k, s) for k in kinds for s in severities]
    for k, s in cells:
        CorruptionSpec(k, s)
    return EvalSuite(shape_spec, clean, held, pool, cells, seed)


@dataclass
class EvalReport:
    checkpoint_hash: str
    config_fingerprint: str
    top1: dict[str, float] = field(default_factory=dict)  # dataset name -> accuracy
    errors: dict[Cell, float] = field(default_factory=dict)  # corruption cell -> error in %
    mce: float | None = None
    baseline_hash: str | None = None

    def rows(self) -> list[dict]:
        out = []
        for name, acc in self.top1.items():
            out.append({"dataset": name, "corruption": "", "severity": "", "top1": acc,
                        "error": 100.0 * (1.0 - acc)})
        for (kind, sev), err in self.errors.items():
            out.append({"dataset": "pool", "corruption": kind, "severity": sev,
                        "top1": 1.0 - err / 100.0, "error": err})
        if self.mce is not None:
            out.append({"dataset": "pool", "corruption": "mCE", "severity": "", "top1": "",
                        "error": self.mce})
        for r in out:
            r["checkpoint"] = self.checkpoint_hash
            r["config"] = self.config_fingerprint
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            if self.mce is not None:
                fh.write(f"# mCE normalised by the pixel_only twin {self.baseline_hash}, "
                         f"not by an external reference model\n")
            w = csv.DictWriter(fh, REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows():
                w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


class _CodeCache:
    """Discrete tokens depend only on the frozen VQ, so share them across models."""

    def __init__(self):
        # entries hold the dataset so its id cannot be reused by a later one
        self._cache: dict[tuple[int, int], tuple[Dataset, np.ndarray]] = {}

    def get(self, model: ViTModel, ds: Dataset) -> np.ndarray | None:
        if not model.config.uses_discrete:
            return None
        key = (id(model.vq), id(ds))
        if key not in self._cache:
            self._cache[key] = (ds, model.discrete_tokens(ds.images))
        return self._cache[key][1]


def evaluate(model: ViTModel, suite: EvalSuite, checkpoint_hash: str = "",
             baseline: EvalReport | None = None, datasets: Iterable[str] = ("clean", "held_out"),
             cells: Iterable[Cell] | None = None) -> EvalReport:
    cache = _CodeCache()
    report = EvalReport(checkpoint_hash, config_fingerprint(model.config))
    for name in datasets:
        ds = getattr(suite, name)
        report.top1[name] = top1(model, ds, cache.get(model, ds))
    for cell in suite.cells if cells is None else cells:
        ds = suite.corrupted(cell)
        report.errors[cell] = 100.0 * (1.0 - top1(model, ds, cache.get(model, ds)))
    if baseline is not None:
        report.mce = mce(report.errors, baseline.errors)
        report.baseline_hash = baseline.checkpoint_hash
    return report


# -- ablations --------------------------------------------------------------------------

@dataclass
class AblationResult:
    dataset: str
    with_value: float
    without_value: float

    @property
    def relative_drop(self) -> float:
        """Percentage drop relative to the value with the component present."""
        if self.with_value == 0:
            return 0.0 if self.without_value == 0 else -math.inf
        return 100.0 * (self.with_value - self.without_value) / self.with_value


def check_twin(with_cfg: ViTConfig, without_cfg: ViTConfig) -> None:
    a = dict(with_cfg.to_items())
    b = dict(without_cfg.to_items())
    if a.get("use_pos_emb") != "true":
        raise ValueError("pos_emb ablation: reference model was trained without position embeddings")
    a.pop("use_pos_emb")
    b.pop("use_pos_emb")
    if a != b:
        diff = sorted(k for k in a if a[k] != b.get(k))
        raise ValueError(f"pos_emb ablation: twin configs differ in {diff}")


def pos_emb_ablation(model: ViTModel, suite: EvalSuite, twin: ViTModel | None = None,
                     train_twin: Callable[[ViTConfig], ViTModel] | None = None,
                     datasets: Iterable[str] = ("clean", "held_out"),
                     cells: Iterable[Cell] = (("texture_swap", 3), ("grayscale_edges", 3))
                     ) -> list[AblationResult]:
    """Accuracy with and without position embeddings, per evaluation set.

    ``twin`` must share every config field except ``use_pos_emb``; when absent
    it is produced by ``train_twin``.
    """
    if twin is None:
        if train_twin is None:
            raise ValueError("pos_emb ablation needs a twin model or a way to train one")
        cfg = ViTConfig(**{**model.config.__dict__, "use_pos_emb": False})
        twin = train_twin(cfg)
    check_twin(model.config, twin.config)
    cache = _CodeCache()
    out = []
    for name in datasets:
        ds = getattr(suite, name)
        out.append(AblationResult(name, top1(model, ds, cache.get(model, ds)),
                                  top1(twin, ds, cache.get(twin, ds))))
    for cell in cells:
        ds = suite.corrupted(cell)
        out.append(AblationResult(f"{cell[0]}_{cell[1]}", top1(model, ds, cache.get(model, ds)),
                                  top1(twin, ds, cache.get(twin, ds))))
    return out


def write_ablation_csv(path, results: list[AblationResult], hash_with: str = "", hash_without: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in results:
            w.writerow([r.dataset, _fmt(r.with_value), _fmt(r.without_value), _fmt(r.relative_drop),
                        hash_with, hash_without])


# -- sweeps -----------------------------------------------------------------------------

SWEEP_AXES = ("codebook_size", "pixel_dim", "fusion_mode")


def sweep_member_config(axis: str, value, base: ViTConfig) -> tuple[ViTConfig, int | None]:
    """ViT config for one sweep member and, for the codebook axis, the codebook size.

    On the pixel_dim axis ``0`` means discrete tokens only and ``all`` means
    pixel tokens only; other values use concatenation with that pixel width.
    """
    fields = dict(base.__dict__)
    if axis == "codebook_size":
        return ViTConfig(**fields), int(value)
    if axis == "pixel_dim":
        if str(value) == "all":
            fields["fusion"] = "pixel_only"
        elif int(value) == 0:
            fields["fusion"] = "discrete_only"
        else:
            fields["fusion"] = "concat"
            fields["pixel_dim"] = int(value)
        return ViTConfig(**fields), None
    if axis == "fusion_mode":
        fields["fusion"] = str(value)
        return ViTConfig(**fields), None
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


@dataclass
class SweepRow:
    axis: str
    value: str
    status: str
    report: EvalReport | None = None
    error: str = ""


def sweep(axis: str, values: Iterable, base_config: ViTConfig, suite: EvalSuite,
          train_member: Callable[[ViTConfig, int | None], tuple[ViTModel, str]],
          baseline: EvalReport | None = None, cells: Iterable[Cell] | None = None,
          log: Callable[[str], None] | None = None) -> list[SweepRow]:
    """Train and evaluate one model per value; failures become marked rows."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    rows = []
    for value in values:
        try:
            cfg, k = sweep_member_config(axis, value, base_config)
            model, ckpt_hash = train_member(cfg, k)
            cell_list = list(suite.cells if cells is None else cells)
            for extra in (("texture_swap", 3), ("grayscale_edges", 3)):
                if extra not in cell_list:
                    cell_list.append(extra)
            report = evaluate(model, suite, ckpt_hash, None, cells=cell_list)
            if baseline is not None and set(baseline.errors) <= set(report.errors):
                grid = {c: report.errors[c] for c in baseline.errors}
                report.mce = mce(grid, baseline.errors)
                report.baseline_hash = baseline.checkpoint_hash
            rows.append(SweepRow(axis, str(value), "ok", report))
        except Exception as exc:  # a failed member is recorded, the sweep goes on
            rows.append(SweepRow(axis, str(value), "failed", None, f"{type(exc).__name__}: {exc}"))
        if log:
            r = rows[-1]
            log(f"{axis}={r.value} {r.status}" + (f" {r.error}" if r.error else ""))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            if r.report is None:
                w.writerow([r.axis, r.value, "FAILED"] + [""] * (len(SWEEP_COLUMNS) - 3))
                continue
            rep = r.report
            errs = rep.errors

            def acc(cell):
                return _fmt(1.0 - errs[cell] / 100.0) if cell in errs else ""

            mean_err = _fmt(float(np.mean(list(errs.values())))) if errs else ""
            w.writerow([r.axis, r.value, r.status, rep.checkpoint_hash, rep.config_fingerprint,
                        _fmt(rep.top1.get("clean", float("nan"))),
                        _fmt(rep.top1.get("held_out", float("nan"))),
                        acc(("texture_swap", 3)), acc(("grayscale_edges", 3)), mean_err,
                        "" if rep.mce is None else _fmt(rep.mce)])


# -- image files ------------------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary 8-bit greyscale PGM of a 2-D array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + _to_u8(img).tobytes()


def ppm_bytes(img: np.ndarray) -> bytes:
    """Binary 8-bit RGB PPM of an (H, W, 3) array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(img).tobytes()


_PNM_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(raw: bytes) -> np.ndarray:
    """Parse a binary P5/P6 file written by :func:`pgm_bytes` or :func:`ppm_bytes`."""
    m = _PNM_HEADER.match(raw)
    if m is None:
        raise ValueError("not a binary PGM/PPM file")
    w, h, maxval = int(m[2]), int(m[3]), int(m[4])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    ch = 1 if m[1] == b"P5" else 3
    # exactly one whitespace byte separates the header from the payload
    body = raw[m.end():]
    if len(body) != w * h * ch:
        raise ValueError(f"PNM payload has {len(body)} bytes, expected {w * h * ch}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape((h, w) if ch == 1 else (h, w, 3))
    return arr.astype(np.float64) / 255.0


def heatmap_image(grid_map: np.ndarray, patch: int) -> np.ndarray:
    """Rollout map scaled to [0, 1] by its maximum and upsampled to pixel resolution."""
    peak = grid_map.max()
    norm = grid_map / peak if peak > 0 else grid_map
    return np.kron(norm, np.ones((patch, patch)))


def side_by_side(a: np.ndarray, b: np.ndarray, gap: int = 2) -> np.ndarray:
    h = a.shape[0]
    sep = np.ones((h, gap, a.shape[2]))
    return np.concatenate([a, sep, b], axis=1)
