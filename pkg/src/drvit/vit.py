"""Vision Transformer whose input layer can fuse discrete codebook tokens with
pixel tokens.

Fusion modes (per patch, ``v`` = codebook row of the patch's discrete token,
``p`` = linear projection of the flattened patch):

* ``pixel_only``     p with d_p = D
* ``discrete_only``  v, zero-padded (or linearly projected when d_c > D)
* ``add``            (v + p) E2 with p sharing v's width
* ``concat``         [v; p; 0]
* ``gate``           [v; softmax(MLP([v; p])) * p; 0]
* ``cross_attention`` [v; MCA(query=v, key=value=p); 0]
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .config import coerce_dataclass, format_value
from . import tensor as T
from .tensor import Tensor
from .vq import VqVae, file_sha256, load_vq

FUSION_MODES = ("pixel_only", "discrete_only", "add", "concat", "gate", "cross_attention")
# subtracted from [0, 1] pixels before the patch projection; uncentred patches share a large
# common component that keeps small models on the uniform-prediction plateau for thousands of steps
PIXEL_CENTER = 0.5
POOLS = ("class_token", "mean")
VITC_MAGIC = b"VITC"
VITC_VERSION = 1


@dataclass
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    depth: int = 4
    hidden_dim: int = 64
    mlp_dim: int = 128
    heads: int = 4
    num_classes: int = 4
    fusion: str = "pixel_only"
    pixel_dim: int = 16
    discrete_dim: int = 32
    use_pos_emb: bool = True
    pool: str = "class_token"
    cross_heads: int = 2

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}; expected one of {POOLS}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.fusion in ("concat", "gate", "cross_attention"):
            if self.discrete_dim + self.pixel_dim > self.hidden_dim:
                raise ValueError(
                    f"{self.fusion}: discrete_dim + pixel_dim = "
                    f"{self.discrete_dim + self.pixel_dim} exceeds hidden_dim {self.hidden_dim}")
            if self.pixel_dim < 1:
                raise ValueError(f"{self.fusion} needs pixel_dim >= 1")
        if self.fusion == "cross_attention" and self.pixel_dim % self.cross_heads:
            raise ValueError(f"pixel_dim {self.pixel_dim} not divisible by cross_heads {self.cross_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def uses_discrete(self) -> bool:
        return self.fusion != "pixel_only"

    @property
    def uses_pixels(self) -> bool:
        return self.fusion != "discrete_only"

    @property
    def pad_width(self) -> int:
        """Zero padding appended by concat/gate/cross_attention."""
        if self.fusion in ("concat", "gate", "cross_attention"):
            return self.hidden_dim - self.discrete_dim - self.pixel_dim
        if self.fusion == "discrete_only" and self.discrete_dim <= self.hidden_dim:
            return self.hidden_dim - self.discrete_dim
        return 0

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, format_value(getattr(self, f.name))) for f in fields(self)]


def patchify(x, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, L, P*P*C), patches in raster order, pixels row-major then channel.

    A single (H, W, C) image gives (L, P*P*C).
    """
    x = T.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"patchify: image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    y = T.reshape(x, (b, gh, patch, gw, patch, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (b, gh * gw, patch * patch * c))
    return T.reshape(y, y.shape[1:]) if single else y


def unpatchify(xp, patch: int, height: int, width: int, channels: int) -> Tensor:
    xp = T.as_tensor(xp)
    single = xp.ndim == 2
    if single:
        xp = T.reshape(xp, (1,) + xp.shape)
    b = xp.shape[0]
    gh, gw = height // patch, width // patch
    y = T.reshape(xp, (b, gh, gw, patch, patch, channels))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (b, height, width, channels))
    return T.reshape(y, y.shape[1:]) if single else y


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; inputs (B, N, d) -> (output (B, Nq, d), weights (B, h, Nq, Nk))."""
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    qh = T.transpose(T.reshape(q, (b, nq, heads, dh)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (b, nk, heads, dh)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (b, nk, heads, dh)), (0, 2, 1, 3))
    attn = T.softmax(T.scale(T.matmul(qh, kh), 1.0 / np.sqrt(dh)), axis=-1)
    out = T.transpose(T.matmul(attn, vh), (0, 2, 1, 3))
    return T.reshape(out, (b, nq, d)), attn


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rng):
        self.qkv = nn.Linear(dim, 3 * dim, rng)
        self.proj = nn.Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        out, attn = multi_head_attention(q, k, v, self._heads)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig, rng):
        self.ln1 = nn.LayerNorm(cfg.hidden_dim)
        self.attn = SelfAttention(cfg.hidden_dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.hidden_dim)
        self.fc1 = nn.Linear(cfg.hidden_dim, cfg.mlp_dim, rng)
        self.fc2 = nn.Linear(cfg.mlp_dim, cfg.hidden_dim, rng)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        a, attn = self.attn(self.ln1(h))
        h = h + a
        h = h + self.fc2(T.gelu(self.fc1(self.ln2(h))))
        return h, attn


@dataclass
class AttentionRecord:
    """Per block, an array (B, heads, L+1, L+1) of attention weights."""

    blocks: list

    def __len__(self) -> int:
        return len(self.blocks)


class ViTModel(nn.Module):
    def __init__(self, cfg: ViTConfig, vq: VqVae | None = None, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._cfg = cfg
        self._vq = None
        d, dp, dc = cfg.hidden_dim, cfg.pixel_dim, cfg.discrete_dim
        if cfg.uses_discrete:
            if vq is None:
                raise ValueError(f"fusion {cfg.fusion!r} needs a VQ model for discrete tokens")
            self.attach_vq(vq)
            # codebook is finetuned as part of the classifier
            self.codebook = T.parameter(vq.codebook.data.copy())
        if cfg.fusion == "pixel_only":
            self.pixel_proj = nn.Linear(cfg.patch_dim, d, rng)
        elif cfg.fusion == "add":
            self.pixel_proj = nn.Linear(cfg.patch_dim, dc, rng)
        elif cfg.uses_pixels:
            self.pixel_proj = nn.Linear(cfg.patch_dim, dp, rng)
        if cfg.fusion == "discrete_only" and dc > d:
            self.discrete_proj = nn.Linear(dc, d, rng)
        if cfg.fusion == "add" and dc != d:
            self.fuse_proj = nn.Linear(dc, d, rng)
        if cfg.fusion == "gate":
            self.gate_fc1 = nn.Linear(dc + dp, dc + dp, rng)
            self.gate_fc2 = nn.Linear(dc + dp, dp, rng)
        if cfg.fusion == "cross_attention":
            self.cross_q = nn.Linear(dc, dp, rng)
            self.cross_k = nn.Linear(dp, dp, rng)
            self.cross_v = nn.Linear(dp, dp, rng)
            self.cross_out = nn.Linear(dp, dp, rng)
        self.cls_token = T.parameter(np.zeros((1, 1, d)))
        if cfg.use_pos_emb:
            self.pos_emb = T.parameter(nn.trunc_normal(rng, (1, cfg.num_patches + 1, d)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.num_classes, rng)

    @property
    def config(self) -> ViTConfig:
        return self._cfg

    @property
    def vq(self) -> VqVae | None:
        return self._vq

    def attach_vq(self, vq: VqVae) -> None:
        cfg = self._cfg
        if vq.config.downsample != cfg.patch_size:
            raise ValueError(f"VQ downsampling {vq.config.downsample} != patch size {cfg.patch_size}")
        if vq.config.embed_dim != cfg.discrete_dim:
            raise ValueError(f"VQ embed_dim {vq.config.embed_dim} != discrete_dim {cfg.discrete_dim}")
        vq.set_trainable(False)
        self._vq = vq

    # -- input layer ---------------------------------------------------------------
    def discrete_tokens(self, x) -> np.ndarray:
        """Token grid flattened to (B, L); the encoder runs without a graph."""
        if self._vq is None:
            raise ValueError("no VQ model attached")
        idx = self._vq.encode_indices(x)
        return idx.reshape(idx.shape[0], -1)

    def build_input(self, x, codes: np.ndarray | None = None) -> Tensor:
        """Token sequence h_0 of shape (B, L+1, D)."""
        cfg = self._cfg
        x = T.as_tensor(x)
        b = x.shape[0]
        if cfg.uses_discrete and codes is None:
            codes = self.discrete_tokens(x)
        v = T.embedding(self.codebook, np.asarray(codes).reshape(b, -1)) if cfg.uses_discrete else None
        p = self.pixel_proj(patchify(x - PIXEL_CENTER, cfg.patch_size)) if cfg.uses_pixels else None
        tokens = self._fuse(v, p)
        cls = T.mul(self.cls_token, np.ones((b, 1, 1)))
        h = T.concat([cls, tokens], axis=1)
        if cfg.use_pos_emb:
            h = h + self.pos_emb
        return h

    def _fuse(self, v: Tensor | None, p: Tensor | None) -> Tensor:
        cfg = self._cfg
        mode = cfg.fusion
        if mode == "pixel_only":
            return p
        if mode == "discrete_only":
            if cfg.discrete_dim > cfg.hidden_dim:
                return self.discrete_proj(v)
            return T.pad_last(v, cfg.pad_width)
        if mode == "add":
            s = v + p
            return self.fuse_proj(s) if cfg.discrete_dim != cfg.hidden_dim else s
        if mode == "concat":
            return T.pad_last(T.concat([v, p], axis=-1), cfg.pad_width)
        if mode == "gate":
            g = T.softmax(self.gate_fc2(T.gelu(self.gate_fc1(T.concat([v, p], axis=-1)))), axis=-1)
            return T.pad_last(T.concat([v, g * p], axis=-1), cfg.pad_width)
        a, _ = multi_head_attention(self.cross_q(v), self.cross_k(p), self.cross_v(p), cfg.cross_heads)
        return T.pad_last(T.concat([v, self.cross_out(a)], axis=-1), cfg.pad_width)

    # -- encoder & head ----------------------------------------------------------------
    def encoder_forward(self, h0: Tensor, record_attention: bool = False):
        cfg = self._cfg
        if h0.ndim != 3 or h0.shape[1:] != (cfg.num_patches + 1, cfg.hidden_dim):
            raise T.ShapeError(f"encoder_forward: expected (B, {cfg.num_patches + 1}, {cfg.hidden_dim}), "
                               f"got {h0.shape}")
        h = h0
        record = AttentionRecord([]) if record_attention else None
        for blk in self.blocks:
            h, attn = blk(h)
            if record is not None:
                record.blocks.append(attn.data.copy())
        h = self.ln_f(h)
        y = h[:, 0] if cfg.pool == "class_token" else T.mean(h[:, 1:], axis=1)
        return y, record

    def classify(self, y: Tensor) -> Tensor:
        return self.head(y)

    def __call__(self, x, codes: np.ndarray | None = None, record_attention: bool = False):
        y, record = self.encoder_forward(self.build_input(x, codes), record_attention)
        logits = self.classify(y)
        return (logits, record) if record_attention else logits

    def predict_logits(self, x, codes: np.ndarray | None = None, batch: int = 250) -> np.ndarray:
        x = np.asarray(x, dtype=T.DTYPE)
        out = []
        with T.no_grad():
            for s in range(0, x.shape[0], batch):
                c = None if codes is None else codes[s : s + batch]
                out.append(self(x[s : s + batch], c).data)
        return np.concatenate(out, axis=0)

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.named_parameters())


def expected_param_count(cfg: ViTConfig, codebook_size: int = 0) -> int:
    """Closed-form parameter count of :class:`ViTModel` for ``cfg``."""
    d, m, dp, dc, pd = cfg.hidden_dim, cfg.mlp_dim, cfg.pixel_dim, cfg.discrete_dim, cfg.patch_dim
    lin = lambda i, o: i * o + o  # noqa: E731
    n = d  # class token
    if cfg.use_pos_emb:
        n += (cfg.num_patches + 1) * d
    n += cfg.depth * (2 * d + lin(d, 3 * d) + lin(d, d) + 2 * d + lin(d, m) + lin(m, d))
    n += 2 * d + lin(d, cfg.num_classes)
    if cfg.uses_discrete:
        n += codebook_size * dc
    mode = cfg.fusion
    if mode == "pixel_only":
        n += lin(pd, d)
    elif mode == "discrete_only":
        n += lin(dc, d) if dc > d else 0
    elif mode == "add":
        n += lin(pd, dc) + (lin(dc, d) if dc != d else 0)
    else:
        n += lin(pd, dp)
        if mode == "gate":
            n += lin(dc + dp, dc + dp) + lin(dc + dp, dp)
        elif mode == "cross_attention":
            n += lin(dc, dp) + 3 * lin(dp, dp)
    return n


# -- attention rollout -----------------------------------------------------------------

def attention_rollout(record: AttentionRecord | list, grid: int | None = None) -> np.ndarray:
    """Class-token attribution over patches.

    Per block, heads are averaged, the identity is added for the residual path
    and rows are renormalised; the per-block matrices are multiplied from the
    first block up. Returns the class row restricted to patch columns, reshaped
    to (grid, grid), with a leading batch axis when the record is batched.
    """
    blocks = record.blocks if isinstance(record, AttentionRecord) else list(record)
    if not blocks:
        raise ValueError("attention_rollout: empty attention record")
    full = rollout_matrix(blocks)
    row = full[..., 0, 1:]
    n = row.shape[-1]
    g = grid if grid is not None else int(round(np.sqrt(n)))
    if g * g != n:
        raise T.ShapeError(f"attention_rollout: {n} patches do not form a {g}x{g} grid")
    return row.reshape(row.shape[:-1] + (g, g))


def rollout_matrix(blocks) -> np.ndarray:
    result = None
    for a in blocks:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim < 3:
            raise T.ShapeError(f"attention_rollout: expected (..., heads, N, N), got {a.shape}")
        avg = a.mean(axis=-3)
        avg = 0.5 * (avg + np.eye(avg.shape[-1]))
        avg = avg / avg.sum(axis=-1, keepdims=True)
        result = avg if result is None else avg @ result
    return result


# -- checkpoints ---------------------------------------------------------------------------
#
# VITC layout (little-endian):
#   b"VITC" | u32 version | u32 n | n bytes of UTF-8 key=value config lines
#   | u32 m | m bytes of UTF-8 "path\nsha256" VQ reference (m = 0 for pixel_only)
#   | u32 n_tensors | TNSR records in named_parameters() order.

def vit_checkpoint_bytes(model: ViTModel, vq_path: str | None = None, vq_hash: str | None = None) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(VITC_MAGIC)
    text = "".join(f"{k}={v}\n" for k, v in cfg.to_items()).encode("utf-8")
    buf.write(struct.pack("<II", VITC_VERSION, len(text)))
    buf.write(text)
    ref = b""
    if cfg.uses_discrete:
        if vq_path is None:
            raise ValueError("discrete fusion checkpoints need the VQ checkpoint path")
        if vq_hash is None:
            vq_hash = file_sha256(vq_path)
        ref = f"{vq_path}\n{vq_hash}".encode("utf-8")
    buf.write(struct.pack("<I", len(ref)))
    buf.write(ref)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        T.write_tensor(buf, p)
    return buf.getvalue()


def save_vit(model: ViTModel, path, vq_path: str | None = None, vq_hash: str | None = None) -> str:
    raw = vit_checkpoint_bytes(model, vq_path, vq_hash)
    with open(path, "wb") as fh:
        fh.write(raw)
    return hashlib.sha256(raw).hexdigest()


def parse_vit_config(text: str) -> ViTConfig:
    pairs = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    return coerce_dataclass(ViTConfig, pairs)


def read_vit_header(fh) -> tuple[ViTConfig, str | None, str | None]:
    magic = T._read_exact(fh, 4, "VITC magic")
    if magic != VITC_MAGIC:
        raise ValueError(f"bad ViT checkpoint magic {magic!r} at offset 0")
    version, n = struct.unpack("<II", T._read_exact(fh, 8, "VITC header"))
    if version != VITC_VERSION:
        raise ValueError(f"unsupported ViT checkpoint version {version} at offset 4")
    cfg = parse_vit_config(T._read_exact(fh, n, "VITC config").decode("utf-8"))
    (m,) = struct.unpack("<I", T._read_exact(fh, 4, "VITC vq reference length"))
    ref = T._read_exact(fh, m, "VITC vq reference").decode("utf-8") if m else ""
    vq_path = vq_hash = None
    if ref:
        vq_path, vq_hash = ref.split("\n", 1)
    return cfg, vq_path, vq_hash


def load_vit(path, vq: VqVae | None = None, vq_path: str | None = None) -> ViTModel:
    """Load a VITC checkpoint, resolving and hash-checking its VQ reference."""
    with open(path, "rb") as fh:
        cfg, ref_path, ref_hash = read_vit_header(fh)
        if cfg.uses_discrete and vq is None:
            candidate = vq_path or ref_path
            if candidate and not os.path.isabs(candidate) and not os.path.exists(candidate):
                candidate = os.path.join(os.path.dirname(os.path.abspath(path)), candidate)
            if not candidate or not os.path.exists(candidate):
                raise FileNotFoundError(f"VQ checkpoint {ref_path!r} referenced by {path} not found")
            actual = file_sha256(candidate)
            if ref_hash and actual != ref_hash:
                raise ValueError(f"VQ checkpoint {candidate} hash {actual} != recorded {ref_hash}")
            vq = load_vq(candidate)
        model = ViTModel(cfg, vq if cfg.uses_discrete else None, 0)
        (count,) = struct.unpack("<I", T._read_exact(fh, 4, "VITC tensor count"))
        names = [n for n, _ in model.named_parameters()]
        if count != len(names):
            raise ValueError(f"ViT checkpoint holds {count} tensors, model expects {len(names)}")
        model.load_state_dict({n: T.read_tensor(fh) for n in names})
    return model
