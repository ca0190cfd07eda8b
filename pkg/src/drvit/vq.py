"""Vector-quantised autoencoder: conv encoder, codebook, conv decoder.

The encoder maps an image ``(B, H, W, C)`` to a grid ``(B, H/P, W/P, d_c)`` where
``P = 2 ** len(stages)``; each grid cell is snapped to its nearest codebook row.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

VQCK_MAGIC = b"VQCK"
VQCK_VERSION = 1


@dataclass
class VQConfig:
    codebook_size: int = 64
    embed_dim: int = 32
    stages: tuple[int, ...] = (1, 1, 1)  # resblocks per downsampling stage
    channel_mult: tuple[int, ...] = (1, 2, 2)
    channels: int = 16
    beta: float = 0.25
    image_channels: int = 3
    recon_weight: float = 0.0  # 0: pixels per code cell, P*P*C

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if len(self.channel_mult) != len(self.stages):
            raise ValueError("channel_mult needs one entry per stage")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.recon_weight < 0:
            raise ValueError(f"recon_weight must be non-negative, got {self.recon_weight}")

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stages)

    def effective_recon_weight(self) -> float:
        if self.recon_weight:
            return self.recon_weight
        return float(self.downsample ** 2 * self.image_channels)

    def stage_channels(self) -> list[int]:
        return [self.channels * m for m in self.channel_mult]


class QuantizeResult(NamedTuple):
    indices: np.ndarray  # integer grid, values in [0, K)
    z_q: Tensor  # gathered codebook rows; gradient reaches the codebook
    ste_output: Tensor  # value of z_q, gradient copied to z_e


class VQLoss(NamedTuple):
    total: Tensor
    recon: Tensor
    dict: Tensor
    commit: Tensor


def nearest_code(z: np.ndarray, codebook: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """argmin_j ||z - V_j||_2 per row of ``z``; ties go to the lowest index."""
    z = np.asarray(z, dtype=T.DTYPE)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError(f"codebook must be a non-empty (K, d) matrix, got {codebook.shape}")
    if z.shape[-1] != codebook.shape[1]:
        raise T.ShapeError(f"quantize: vector dim {z.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for s in range(0, flat.shape[0], chunk):
        diff = flat[s : s + chunk, None, :] - codebook[None, :, :]
        out[s : s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out.reshape(z.shape[:-1])


def quantize(z_e: Tensor, codebook: Tensor) -> QuantizeResult:
    idx = nearest_code(z_e.data, codebook.data)
    z_q = T.embedding(codebook, idx)
    return QuantizeResult(idx, z_q, T.straight_through(z_e, z_q.data))


def straight_through_grad_property(loss_fn, z_e: Tensor, ste_output: Tensor) -> bool:
    """Check that the STE hands ``z_e`` exactly the gradient that reaches ``z_q``.

    ``loss_fn`` maps a tensor shaped like ``ste_output`` to a scalar loss. It is
    evaluated once on the STE output (gradient lands on ``z_e``) and once on a
    fresh leaf holding the same values (gradient lands on that leaf).
    """
    z_e.grad = None
    kept = z_e.retain
    z_e.retain = True
    try:
        T.backward(loss_fn(ste_output))
    finally:
        z_e.retain = kept
    via_ste = z_e.grad
    leaf = T.parameter(ste_output.data.copy())
    T.backward(loss_fn(leaf))
    if via_ste is None:
        return leaf.grad is None or not z_e.requires_grad
    return leaf.grad is not None and np.array_equal(via_ste, leaf.grad)


def vqvae_loss(x, x_hat: Tensor, z_e: Tensor, v_selected: Tensor, beta: float = 0.25,
               recon_weight: float = 1.0) -> VQLoss:
    """Reconstruction + dictionary + commitment loss.

    Squared norms are summed over the embedding axis and averaged over cells.
    The dictionary term only moves the codebook and the commitment term only
    moves the encoder. ``recon`` is always the plain MSE; ``total`` weights it
    by ``recon_weight``.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    recon = T.mse(x_hat, x)
    d = T.stop_gradient(z_e) - v_selected
    dict_loss = T.mean(T.sum_(d * d, axis=-1))
    c = z_e - T.stop_gradient(v_selected)
    commit = T.scale(T.mean(T.sum_(c * c, axis=-1)), beta)
    weighted = recon if recon_weight == 1.0 else T.scale(recon, recon_weight)
    return VQLoss(weighted + dict_loss + commit, recon, dict_loss, commit)


def codebook_perplexity(hist) -> float:
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum()
    if h.size == 0 or total <= 0:
        raise ValueError("codebook_perplexity: empty histogram")
    p = h[h > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def prior_kl_constant(codebook_size: int) -> float:
    """KL term under a uniform prior with deterministic posterior: log K."""
    return math.log(codebook_size)


class ResBlock(nn.Module):
    def __init__(self, ch: int, rng: np.random.Generator):
        self.conv1 = nn.Conv2d(ch, ch, 3, rng)
        self.conv2 = nn.Conv2d(ch, ch, 3, rng)
        # start close to identity
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.relu(self.conv1(T.relu(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: VQConfig, rng: np.random.Generator):
        chans = cfg.stage_channels()
        self.down = []
        self.blocks = []
        prev = cfg.image_channels
        for n_blocks, ch in zip(cfg.stages, chans):
            self.down.append(nn.Conv2d(prev, ch, 4, rng, stride=2))
            self.blocks.append(_Stack([ResBlock(ch, rng) for _ in range(n_blocks)]))
            prev = ch
        self.conv_out = nn.Conv2d(prev, cfg.embed_dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (down, stack) in enumerate(zip(self.down, self.blocks)):
            h = stack(down(h if i == 0 else T.relu(h)))
        return self.conv_out(T.relu(h))


class Decoder(nn.Module):
    def __init__(self, cfg: VQConfig, rng: np.random.Generator):
        chans = cfg.stage_channels()
        self.conv_in = nn.Conv2d(cfg.embed_dim, chans[-1], 3, rng)
        self.blocks = []
        self.up = []
        outs = [cfg.channels] + chans[:-1]
        for n_blocks, ch, out in reversed(list(zip(cfg.stages, chans, outs))):
            self.blocks.append(_Stack([ResBlock(ch, rng) for _ in range(n_blocks)]))
            self.up.append(nn.ConvTranspose2d(ch, out, 4, rng, stride=2))
        self.conv_out = nn.Conv2d(cfg.channels, cfg.image_channels, 3, rng)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.conv_in(z)
        for stack, up in zip(self.blocks, self.up):
            h = up(T.relu(stack(h)))
        return T.sigmoid(self.conv_out(T.relu(h)))


class _Stack(nn.Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class VqVae(nn.Module):
    def __init__(self, cfg: VQConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._cfg = cfg
        self.encoder = Encoder(cfg, rng)
        k = cfg.codebook_size
        self.codebook = T.parameter(rng.uniform(-1.0 / k, 1.0 / k, (k, cfg.embed_dim)))
        self.decoder = Decoder(cfg, rng)

    @property
    def config(self) -> VQConfig:
        return self._cfg

    def _check_image(self, x: Tensor) -> None:
        p = self._cfg.downsample
        if x.ndim != 4 or x.shape[3] != self._cfg.image_channels:
            raise T.ShapeError(f"encode: expected (B, H, W, {self._cfg.image_channels}), got {x.shape}")
        if x.shape[1] % p or x.shape[2] % p:
            raise T.ShapeError(f"encode: spatial dims {x.shape[1:3]} not divisible by {p}")

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        self._check_image(x)
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        z = T.as_tensor(z)
        if z.ndim != 4 or z.shape[3] != self._cfg.embed_dim:
            raise T.ShapeError(f"decode: expected (B, h, w, {self._cfg.embed_dim}), got {z.shape}")
        return self.decoder(z)

    def quantize(self, z_e: Tensor) -> QuantizeResult:
        return quantize(z_e, self.codebook)

    def __call__(self, x):
        z_e = self.encode(x)
        q = self.quantize(z_e)
        return self.decode(q.ste_output), z_e, q

    def loss(self, x) -> tuple[VQLoss, QuantizeResult]:
        x_hat, z_e, q = self(x)
        cfg = self._cfg
        return vqvae_loss(T.as_tensor(x), x_hat, z_e, q.z_q, cfg.beta, cfg.effective_recon_weight()), q

    def encode_indices(self, x, batch: int = 256) -> np.ndarray:
        """Discrete tokens for a batch of images, computed without a graph."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=T.DTYPE)
        out = []
        with T.no_grad():
            for s in range(0, x.shape[0], batch):
                z = self.encode(T.Tensor(x[s : s + batch]))
                out.append(nearest_code(z.data, self.codebook.data))
        return np.concatenate(out, axis=0)

    def reconstruct(self, x, batch: int = 256) -> np.ndarray:
        """decode(quantize(encode(x))) without a graph."""
        x = np.asarray(x, dtype=T.DTYPE)
        out = []
        with T.no_grad():
            for s in range(0, x.shape[0], batch):
                idx = self.encode_indices(x[s : s + batch])
                out.append(self.decode(T.Tensor(self.codebook.data[idx])).data)
        return np.concatenate(out, axis=0)


# -- checkpoints -----------------------------------------------------------------------
#
# VQCK layout (little-endian):
#   b"VQCK" | u32 version | u32 K | u32 d_c | u32 image_channels | u32 channels
#   | u32 n_stages | u32[n_stages] resblocks | u32[n_stages] channel_mult | f64 beta
#   | f64 recon_weight | u32 n_tensors | n_tensors x TNSR records in named_parameters() order
#   (encoder.*, codebook, decoder.*).

def vq_checkpoint_bytes(model: VqVae) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(VQCK_MAGIC)
    n = len(cfg.stages)
    buf.write(struct.pack("<6I", VQCK_VERSION, cfg.codebook_size, cfg.embed_dim,
                          cfg.image_channels, cfg.channels, n))
    buf.write(struct.pack(f"<{n}I", *cfg.stages))
    buf.write(struct.pack(f"<{n}I", *cfg.channel_mult))
    buf.write(struct.pack("<2d", cfg.beta, cfg.recon_weight))
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        T.write_tensor(buf, p)
    return buf.getvalue()


def save_vq(model: VqVae, path) -> str:
    """Write a VQCK checkpoint; returns its sha256."""
    raw = vq_checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(raw)
    return hashlib.sha256(raw).hexdigest()


def load_vq(path) -> VqVae:
    with open(path, "rb") as fh:
        return vq_from_bytes(fh.read())


def vq_from_bytes(raw: bytes) -> VqVae:
    fh = io.BytesIO(raw)
    magic = T._read_exact(fh, 4, "VQCK magic")
    if magic != VQCK_MAGIC:
        raise ValueError(f"bad VQ checkpoint magic {magic!r} at offset 0")
    version, k, d_c, img_c, ch, n = struct.unpack("<6I", T._read_exact(fh, 24, "VQCK header"))
    if version != VQCK_VERSION:
        raise ValueError(f"unsupported VQ checkpoint version {version} at offset 4")
    stages = struct.unpack(f"<{n}I", T._read_exact(fh, 4 * n, "VQCK stages"))
    mult = struct.unpack(f"<{n}I", T._read_exact(fh, 4 * n, "VQCK channel_mult"))
    beta, recon_weight = struct.unpack("<2d", T._read_exact(fh, 16, "VQCK beta/recon_weight"))
    cfg = VQConfig(codebook_size=k, embed_dim=d_c, stages=stages, channel_mult=mult,
                   channels=ch, beta=beta, image_channels=img_c, recon_weight=recon_weight)
    model = VqVae(cfg, 0)
    (count,) = struct.unpack("<I", T._read_exact(fh, 4, "VQCK tensor count"))
    names = [name for name, _ in model.named_parameters()]
    if count != len(names):
        raise ValueError(f"VQ checkpoint holds {count} tensors, model expects {len(names)}")
    model.load_state_dict({name: T.read_tensor(fh) for name in names})
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


__all__ = [
    "VQConfig", "VqVae", "QuantizeResult", "VQLoss", "quantize", "nearest_code",
    "vqvae_loss", "codebook_perplexity", "straight_through_grad_property",
    "prior_kl_constant", "save_vq", "load_vq", "vq_checkpoint_bytes", "vq_from_bytes",
    "file_sha256",
]
