"""Synthetic shape-vs-texture images and the DSET binary format.

Each image is one anti-aliased shape over a background. Foreground and
background are both filled with procedural textures; the label is the shape.
Two disjoint texture pools exist: the ``iid_random`` policy draws from the
training pool, ``held_out`` from the other one.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import format_value

DSET_MAGIC = b"DSET"
DSET_VERSION = 1
_HEADER = struct.Struct("<4sI5IQ")  # magic, version, n, h, w, c, classes, seed

SHAPES = ("circle", "square", "triangle", "cross", "ring", "hexagon")
TRAIN_TEXTURES = ("stripes", "checker", "noise", "gradient")
HELDOUT_TEXTURES = ("dots", "waves", "plaid", "speckle")
POLICIES = ("iid_random", "held_out")


@dataclass
class ShapeSpec:
    classes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    image_size: int = 32
    train_textures: tuple[str, ...] = TRAIN_TEXTURES
    heldout_textures: tuple[str, ...] = HELDOUT_TEXTURES
    size_range: tuple[float, ...] = (0.35, 0.45)  # radius as a fraction of image size
    position_jitter: float = 0.06
    rotation_range: tuple[float, ...] = (0.0, 0.0)  # degrees
    contrast_range: tuple[float, ...] = (0.15, 0.35)  # texture amplitude
    min_color_gap: float = 0.3
    supersample: int = 4
    # held-out renders use their own amplitude and colour gap; empty/None: same as training
    heldout_contrast_range: tuple[float, ...] = (0.5, 0.7)
    heldout_color_gap: float | None = None

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.train_textures = tuple(self.train_textures)
        self.heldout_textures = tuple(self.heldout_textures)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.rotation_range = tuple(float(v) for v in self.rotation_range)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        self.heldout_contrast_range = tuple(float(v) for v in self.heldout_contrast_range)
        if not self.classes:
            raise ValueError("ShapeSpec: empty class list")
        if not self.train_textures or not self.heldout_textures:
            raise ValueError("ShapeSpec: empty texture pool")
        for s in self.classes:
            if s not in SHAPES:
                raise ValueError(f"ShapeSpec: unknown shape {s!r}")
        for t in self.train_textures + self.heldout_textures:
            if t not in TEXTURES:
                raise ValueError(f"ShapeSpec: unknown texture {t!r}")
        if len(self.heldout_contrast_range) not in (0, 2):
            raise ValueError("ShapeSpec: heldout_contrast_range needs two values or none")
        if set(self.train_textures) & set(self.heldout_textures):
            raise ValueError("ShapeSpec: training and held-out texture pools overlap")

    def fingerprint(self) -> str:
        text = "".join(f"{k}={format_value(v)}\n" for k, v in asdict(self).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def render_params(self, policy: str) -> tuple[tuple[str, ...], tuple[float, ...], float]:
        """Texture pool, amplitude range and minimum colour gap for a policy."""
        pool = self.pool(policy)
        if policy == "held_out":
            return (pool, self.heldout_contrast_range or self.contrast_range,
                    self.min_color_gap if self.heldout_color_gap is None else self.heldout_color_gap)
        return pool, self.contrast_range, self.min_color_gap

    def pool(self, policy: str) -> tuple[str, ...]:
        if policy == "iid_random":
            return self.train_textures
        if policy == "held_out":
            return self.heldout_textures
        raise ValueError(f"unknown texture policy {policy!r}; expected one of {POLICIES}")


@dataclass(frozen=True)
class RenderInfo:
    """Geometry of one rendered shape, enough to re-texture it."""

    shape: str
    cx: float
    cy: float
    radius: float
    theta: float  # radians


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = ""
    seed: int = 0
    spec_hash: str = ""
    renders: list[RenderInfo] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("Dataset: image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("Dataset: label out of range")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        renders = [self.renders[i] for i in idx] if self.renders is not None else None
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split,
                       self.seed, self.spec_hash, renders)


# -- geometry -------------------------------------------------------------------------

def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if shape == "triangle":
        inside = np.ones(u.shape, dtype=bool)
        for ang in (270.0, 30.0, 150.0):
            a = np.deg2rad(ang)
            inside &= u * np.cos(a) + v * np.sin(a) <= 0.5
        return inside
    if shape == "cross":
        au, av = np.abs(u), np.abs(v)
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.5 ** 2)
    if shape == "hexagon":
        inside = np.ones(u.shape, dtype=bool)
        for k in range(6):
            a = np.deg2rad(60.0 * k)
            inside &= u * np.cos(a) + v * np.sin(a) <= 0.87
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def shape_mask(info: RenderInfo, size: int, supersample: int = 4) -> np.ndarray:
    """Fractional pixel coverage (size, size) of the shape."""
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - info.cx) / info.radius, (yy - info.cy) / info.radius
    c, sn = np.cos(info.theta), np.sin(info.theta)
    u, v = c * dx + sn * dy, -sn * dx + c * dy
    hit = _inside(info.shape, u, v).astype(np.float64)
    return hit.reshape(size, s, size, s).mean(axis=(1, 3))


# -- textures -------------------------------------------------------------------------

def _grid(size: int):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    return xx, yy


def _stripes(size, rng):
    xx, yy = _grid(size)
    phi = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 6.0)
    t = (xx * np.cos(phi) + yy * np.sin(phi)) / period + rng.uniform()
    return (np.floor(2 * t) % 2).astype(np.float64)


def _checker(size, rng):
    xx, yy = _grid(size)
    cell = rng.integers(2, 5)
    ox, oy = rng.integers(0, cell, 2)
    return ((np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2).astype(np.float64)


def _noise(size, rng):
    cell = int(rng.integers(3, 6))
    n = -(-size // cell) + 1
    coarse = rng.uniform(size=(n, n))
    fine = np.kron(coarse, np.ones((cell, cell)))
    ox, oy = rng.integers(0, cell, 2)
    return fine[oy : oy + size, ox : ox + size]


def _gradient(size, rng):
    xx, yy = _grid(size)
    phi = rng.uniform(0, 2 * np.pi)
    t = xx * np.cos(phi) + yy * np.sin(phi)
    return (t - t.min()) / max(t.max() - t.min(), 1e-9)


def _dots(size, rng):
    xx, yy = _grid(size)
    period = rng.uniform(4.0, 6.0)
    r = rng.uniform(1.0, 1.8)
    ox, oy = rng.uniform(0, period, 2)
    dx = (xx + ox) % period - period / 2
    dy = (yy + oy) % period - period / 2
    return (dx * dx + dy * dy <= r * r).astype(np.float64)


def _waves(size, rng):
    xx, yy = _grid(size)
    cx, cy = rng.uniform(0, size, 2)
    period = rng.uniform(3.0, 5.0)
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return 0.5 + 0.5 * np.sin(2 * np.pi * d / period + rng.uniform(0, 2 * np.pi))


def _plaid(size, rng):
    xx, yy = _grid(size)
    p1, p2 = rng.uniform(3.0, 6.0, 2)
    phi = rng.uniform(0, np.pi)
    a = xx * np.cos(phi) + yy * np.sin(phi)
    b = -xx * np.sin(phi) + yy * np.cos(phi)
    return 0.5 * ((np.floor(2 * a / p1) % 2) + (np.floor(2 * b / p2) % 2))


def _speckle(size, rng):
    return (rng.uniform(size=(size, size)) < 0.5).astype(np.float64)


TEXTURES = {
    "stripes": _stripes,
    "checker": _checker,
    "noise": _noise,
    "gradient": _gradient,
    "dots": _dots,
    "waves": _waves,
    "plaid": _plaid,
    "speckle": _speckle,
}


def render_texture(name: str, size: int, base: np.ndarray, amplitude: float,
                   rng: np.random.Generator) -> np.ndarray:
    """(size, size, 3) texture: pattern in [0,1] blended between base -/+ amplitude."""
    pattern = TEXTURES[name](size, rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    lo = base - amplitude * direction
    hi = base + amplitude * direction
    return np.clip(lo + pattern[..., None] * (hi - lo), 0.0, 1.0)


def _two_colors(rng: np.random.Generator, gap: float) -> tuple[np.ndarray, np.ndarray]:
    fg = rng.uniform(0.15, 0.85, 3)
    for _ in range(64):
        bg = rng.uniform(0.15, 0.85, 3)
        if np.linalg.norm(fg - bg) >= gap:
            return fg, bg
    return fg, np.clip(1.0 - fg, 0.0, 1.0)


def _texture_pair(spec: ShapeSpec, policy: str, rng):
    pool, (lo, hi), gap = spec.render_params(policy)
    fg_base, bg_base = _two_colors(rng, gap)
    fg_name, bg_name = pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]
    size = spec.image_size
    fg = render_texture(fg_name, size, fg_base, rng.uniform(lo, hi), rng)
    bg = render_texture(bg_name, size, bg_base, rng.uniform(lo, hi), rng)
    return fg, bg


def _sample_geometry(spec: ShapeSpec, shape: str, rng) -> RenderInfo:
    size = spec.image_size
    lo, hi = spec.size_range
    radius = rng.uniform(lo, hi) * size
    jitter = spec.position_jitter * size
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    theta = np.deg2rad(rng.uniform(*spec.rotation_range))
    return RenderInfo(shape, float(cx), float(cy), float(radius), float(theta))


def compose(mask: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    m = mask[..., None]
    return np.clip(m * fg + (1.0 - m) * bg, 0.0, 1.0)


def retexture(info: RenderInfo, spec: ShapeSpec, policy: str, rng) -> np.ndarray:
    """Render ``info``'s geometry with fresh textures drawn under ``policy``."""
    fg, bg = _texture_pair(spec, policy, rng)
    return compose(shape_mask(info, spec.image_size, spec.supersample), fg, bg)


def _quantize_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def gen_shapes(spec: ShapeSpec, n: int, seed: int, texture_policy: str = "iid_random",
               split: str | None = None) -> Dataset:
    """Render ``n`` images; labels cycle through the classes round-robin.

    Image ``i`` uses its own generator seeded by ``(seed, i, policy)``, so any
    prefix of a dataset is reproducible on its own. Pixel values are snapped to
    the 8-bit grid so the DSET round trip is lossless.
    """
    if n < len(spec.classes):
        raise ValueError(f"gen_shapes: n={n} smaller than the number of classes {len(spec.classes)}")
    spec.pool(texture_policy)  # rejects unknown policies
    pcode = POLICIES.index(texture_policy)
    size = spec.image_size
    images = np.empty((n, size, size, 3), dtype=np.float64)
    labels = np.arange(n, dtype=np.int64) % len(spec.classes)
    renders = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, pcode])
        info = _sample_geometry(spec, spec.classes[labels[i]], rng)
        images[i] = retexture(info, spec, texture_policy, rng)
        renders.append(info)
    return Dataset(_quantize_u8(images), labels, len(spec.classes), split or texture_policy,
                   seed, spec.fingerprint(), renders)


def regenerate_renders(spec: ShapeSpec, n: int, seed: int, texture_policy: str = "iid_random") -> list[RenderInfo]:
    """Geometry of a generated dataset without rendering it (for loaded DSET files)."""
    pcode = POLICIES.index(texture_policy)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, pcode])
        out.append(_sample_geometry(spec, spec.classes[i % len(spec.classes)], rng))
    return out


# -- DSET files -------------------------------------------------------------------------

def dset_size(n: int, h: int, w: int, c: int) -> int:
    return _HEADER.size + 2 * n + n * h * w * c


def dataset_bytes(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    if ds.num_classes > 65535:
        raise ValueError("DSET stores labels as u16")
    header = _HEADER.pack(DSET_MAGIC, DSET_VERSION, n, h, w, c, ds.num_classes, ds.seed)
    labels = ds.labels.astype("<u2").tobytes()
    pixels = np.round(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
    return header + labels + pixels


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(raw: bytes, split: str = "") -> Dataset:
    if len(raw) < _HEADER.size:
        raise ValueError(f"DSET truncated in header at offset {len(raw)}: need {_HEADER.size} bytes")
    magic, version, n, h, w, c, classes, seed = _HEADER.unpack_from(raw, 0)
    if magic != DSET_MAGIC:
        raise ValueError(f"bad DSET magic {magic!r} at offset 0")
    if version != DSET_VERSION:
        raise ValueError(f"unsupported DSET version {version} at offset 4")
    off = _HEADER.size
    if len(raw) < off + 2 * n:
        raise ValueError(f"DSET truncated in labels at offset {len(raw)}: need {off + 2 * n} bytes")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    npix = n * h * w * c
    if len(raw) < off + npix:
        raise ValueError(f"DSET truncated in images at offset {len(raw)}: need {off + npix} bytes")
    if len(raw) > off + npix:
        raise ValueError(f"DSET has {len(raw) - off - npix} trailing bytes at offset {off + npix}")
    images = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=off).reshape(n, h, w, c)
    return Dataset(images.astype(np.float64) / 255.0, labels, int(classes), split, int(seed))


def load_dataset(path, split: str = "") -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read(), split)


# -- corruptions ------------------------------------------------------------------------
#
# Parameter per severity 1..5. Every table is strictly monotone toward a
# stronger corruption.

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "defocus_blur", "contrast", "brightness",
                    "pixelate", "texture_swap", "grayscale_edges")

SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.12, 0.18),  # noise std
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # Poisson rate (photons per unit intensity)
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius in pixels
    "contrast": (0.6, 0.45, 0.3, 0.2, 0.1),  # scale about the per-image mean
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "pixelate": (1.5, 2.0, 2.5, 3.0, 4.0),  # downsampling factor
    "texture_swap": (0.2, 0.4, 0.6, 0.8, 1.0),  # blend weight of the re-textured render
    "grayscale_edges": (0.2, 0.4, 0.6, 0.8, 1.0),  # blend weight of the edge sketch
}

# Kinds whose table decreases with severity.
_DECREASING = {"shot_noise", "contrast"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"corruption severity must be in 1..5, got {self.severity}")

    @property
    def param(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        return f"{self.kind}_{self.severity}"


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return img + rng.normal(0.0, sigma, img.shape)


def shot_noise(img: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(np.clip(img, 0.0, 1.0) * rate) / rate


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return k / k.sum()


def _filter2d(img: np.ndarray, kernel: np.ndarray, mode: str = "reflect") -> np.ndarray:
    """Correlate each channel of (H, W, C) with ``kernel`` ('same' output)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw), (0, 0)), mode=mode)
    out = np.zeros_like(img, dtype=np.float64)
    h, w = img.shape[:2]
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i : i + h, j : j + w]
    return out


def defocus_blur(img: np.ndarray, radius: float) -> np.ndarray:
    return _filter2d(img, disk_kernel(radius))


def contrast(img: np.ndarray, c: float) -> np.ndarray:
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * c + mean


def brightness(img: np.ndarray, b: float) -> np.ndarray:
    return img + b


def pixelate(img: np.ndarray, factor: float) -> np.ndarray:
    """Box-average onto a grid ``factor`` times coarser, then nearest upsample."""
    if factor < 1.0:
        raise ValueError(f"pixelate factor must be >= 1, got {factor}")
    if factor == 1.0:
        return img.copy()
    h, w = img.shape[:2]
    ch = max(1, int(round(h / factor)))
    cw = max(1, int(round(w / factor)))
    rows = np.minimum((np.arange(h) * ch) // h, ch - 1)
    cols = np.minimum((np.arange(w) * cw) // w, cw - 1)
    sums = np.zeros((ch, cw, img.shape[2]))
    np.add.at(sums, (rows[:, None], cols[None, :]), img)
    counts = np.zeros((ch, cw))
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    coarse = sums / counts[..., None]
    return coarse[rows[:, None], cols[None, :]]


_LUMA = np.array([0.299, 0.587, 0.114])
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def edge_sketch(img: np.ndarray) -> np.ndarray:
    """Dark strokes on white from the 3x3 gradient magnitude of the luminance."""
    lum = (img[..., :3] @ _LUMA)[..., None] if img.shape[2] >= 3 else img[..., :1]
    gx = _filter2d(lum, _SOBEL_X, mode="edge")
    gy = _filter2d(lum, _SOBEL_X.T, mode="edge")
    mag = np.sqrt(gx * gx + gy * gy)[..., 0]
    peak = mag.max()
    sketch = 1.0 - (mag / peak if peak > 0 else mag)
    return np.repeat(sketch[..., None], img.shape[2], axis=2)


def grayscale_edges(img: np.ndarray, weight: float) -> np.ndarray:
    return (1.0 - weight) * img + weight * edge_sketch(img)


def texture_swap(img: np.ndarray, weight: float, render: RenderInfo | None, spec: ShapeSpec | None,
                 rng: np.random.Generator) -> np.ndarray:
    if render is None or spec is None:
        raise ValueError("texture_swap needs the synthetic render info; not defined for this image")
    swapped = retexture(render, spec, "held_out", rng)
    return (1.0 - weight) * img + weight * swapped


def corrupt(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator,
            render: RenderInfo | None = None, shape_spec: ShapeSpec | None = None) -> np.ndarray:
    """Apply one corruption to a single (H, W, C) image in [0, 1]; output clamped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"corrupt expects one (H, W, C) image, got shape {img.shape}")
    p = spec.param
    k = spec.kind
    if k == "gaussian_noise":
        out = gaussian_noise(img, p, rng)
    elif k == "shot_noise":
        out = shot_noise(img, p, rng)
    elif k == "defocus_blur":
        out = defocus_blur(img, p)
    elif k == "contrast":
        out = contrast(img, p)
    elif k == "brightness":
        out = brightness(img, p)
    elif k == "pixelate":
        out = pixelate(img, p)
    elif k == "texture_swap":
        out = texture_swap(img, p, render, shape_spec, rng)
    else:
        out = grayscale_edges(img, p)
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(ds: Dataset, spec: CorruptionSpec, seed: int,
                    shape_spec: ShapeSpec | None = None) -> Dataset:
    """Corrupt every image; image ``i`` draws from its own ``(seed, i)`` stream."""
    if spec.kind == "texture_swap" and (ds.renders is None or shape_spec is None):
        raise ValueError("texture_swap needs a synthetic dataset with render info and its ShapeSpec")
    kind_code = CORRUPTION_KINDS.index(spec.kind)
    out = np.empty_like(ds.images)
    for i in range(len(ds)):
        rng = np.random.default_rng([seed, i, kind_code, spec.severity])
        render = ds.renders[i] if ds.renders is not None else None
        out[i] = corrupt(ds.images[i], spec, rng, render, shape_spec)
    return Dataset(out, ds.labels.copy(), ds.num_classes, f"{ds.split}/{spec.name}", ds.seed,
                   ds.spec_hash, ds.renders)
