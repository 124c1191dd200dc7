"""Shared 3-D patch-embedding transformer encoder with masked-autoencoder
pretraining.

Volumes are cut into non-overlapping cubic patches, linearly embedded,
tagged with fixed sinusoidal 3-D positional encodings, and passed through
pre-norm transformer blocks. Pretraining masks a random patch subset,
encodes only the visible ones, and reconstructs the masked patches with a
light decoder under an MSE objective on masked patches only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class BackboneConfig:
    volume_dim: int = 32
    patch: int = 8
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    decoder_dim: int = 32
    decoder_layers: int = 1
    mask_ratio: float = 0.75
    mlp_ratio: int = 4

    def validate(self):
        if self.volume_dim < self.patch or self.volume_dim % self.patch != 0:
            raise ConfigError(f"patch {self.patch} must divide volume_dim {self.volume_dim}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.embed_dim % 2 or self.decoder_dim % 2:
            raise ConfigError("embed_dim and decoder_dim must be even (sin/cos pairs)")
        if self.layers < 1 or self.decoder_layers < 1 or self.heads < 1:
            raise ConfigError("layers, decoder_layers and heads must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        return self

    @property
    def n_side(self) -> int:
        return self.volume_dim // self.patch

    @property
    def n_patches(self) -> int:
        return self.n_side ** 3

    @property
    def patch_values(self) -> int:
        return self.patch ** 3


@dataclass
class LatentRepresentation:
    tokens: Tensor  # [n_tokens, embed_dim]
    pooled: Tensor  # [1, embed_dim], mean over tokens


# ---------------------------------------------------------------------------
# tokenization

def patchify(voxels: np.ndarray, patch: int) -> np.ndarray:
    """[D, D, D] -> [n_patches, patch^3].

    Patch order is lexicographic with z-major blocks (bz slowest, bx
    fastest); within a patch, values are flattened lz slowest, lx fastest.
    """
    d = voxels.shape[0]
    if voxels.shape != (d, d, d) or d % patch != 0:
        raise ConfigError(f"patchify needs a cubic volume divisible by {patch}, got {voxels.shape}")
    ns = d // patch
    blocks = voxels.reshape(ns, patch, ns, patch, ns, patch)
    return blocks.transpose(4, 2, 0, 5, 3, 1).reshape(ns ** 3, patch ** 3).astype(np.float64)


def unpatchify(patches: np.ndarray, volume_dim: int, patch: int) -> np.ndarray:
    """Exact inverse of patchify."""
    ns = volume_dim // patch
    blocks = patches.reshape(ns, ns, ns, patch, patch, patch)
    return blocks.transpose(2, 5, 1, 4, 0, 3).reshape(volume_dim, volume_dim, volume_dim)


def patch_grid_coords(n_side: int) -> np.ndarray:
    """Patch-grid (x, y, z) coordinates in patchify order, shape [n, 3]."""
    bz, by, bx = np.meshgrid(np.arange(n_side), np.arange(n_side), np.arange(n_side), indexing="ij")
    return np.stack([bx.ravel(), by.ravel(), bz.ravel()], axis=1).astype(np.float64)


@lru_cache(maxsize=8)
def sincos_positions(n_side: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal 3-D positional encodings, shape [n_side^3, dim].

    Channel pair j encodes the axis j % 3 at a geometrically decreasing
    frequency, so nearby patch coordinates stay distinguishable. The
    returned array is cached and must be treated as read-only.
    """
    coords = patch_grid_coords(n_side)
    pairs = dim // 2
    pe = np.empty((coords.shape[0], dim), dtype=np.float64)
    n_freq = max(1, (pairs + 2) // 3)
    for j in range(pairs):
        axis = j % 3
        k = j // 3
        omega = (1.0 / 64.0) ** (k / max(1, n_freq - 1)) if n_freq > 1 else 1.0
        pe[:, 2 * j] = np.sin(omega * coords[:, axis])
        pe[:, 2 * j + 1] = np.cos(omega * coords[:, axis])
    return pe


# ---------------------------------------------------------------------------
# parameters

def _linear_params(rng, fan_in: int, fan_out: int, scale: float = 0.02):
    w = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


def _block_params(params: dict, prefix: str, dim: int, mlp_ratio: int, rng):
    params[f"{prefix}.ln1.gain"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{prefix}.ln1.bias"] = Tensor(np.zeros(dim), requires_grad=True)
    params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"] = _linear_params(rng, dim, 3 * dim)
    params[f"{prefix}.attn.proj.weight"], params[f"{prefix}.attn.proj.bias"] = _linear_params(rng, dim, dim)
    params[f"{prefix}.ln2.gain"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{prefix}.ln2.bias"] = Tensor(np.zeros(dim), requires_grad=True)
    params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"] = _linear_params(rng, dim, mlp_ratio * dim)
    params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"] = _linear_params(rng, mlp_ratio * dim, dim)


def init_backbone_params(cfg: BackboneConfig, rng) -> dict[str, Tensor]:
    cfg.validate()
    params: dict[str, Tensor] = {}
    params["backbone.patch_embed.weight"], params["backbone.patch_embed.bias"] = \
        _linear_params(rng, cfg.patch_values, cfg.embed_dim)
    for i in range(cfg.layers):
        _block_params(params, f"backbone.blocks.{i}", cfg.embed_dim, cfg.mlp_ratio, rng)
    params["backbone.final_ln.gain"] = Tensor(np.ones(cfg.embed_dim), requires_grad=True)
    params["backbone.final_ln.bias"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)
    return params


def init_decoder_params(cfg: BackboneConfig, rng) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    params["decoder.embed.weight"], params["decoder.embed.bias"] = \
        _linear_params(rng, cfg.embed_dim, cfg.decoder_dim)
    params["decoder.mask_token"] = Tensor(rng.normal(0.0, 0.02, size=(1, cfg.decoder_dim)), requires_grad=True)
    for i in range(cfg.decoder_layers):
        _block_params(params, f"decoder.blocks.{i}", cfg.decoder_dim, cfg.mlp_ratio, rng)
    params["decoder.final_ln.gain"] = Tensor(np.ones(cfg.decoder_dim), requires_grad=True)
    params["decoder.final_ln.bias"] = Tensor(np.zeros(cfg.decoder_dim), requires_grad=True)
    params["decoder.pred.weight"], params["decoder.pred.bias"] = \
        _linear_params(rng, cfg.decoder_dim, cfg.patch_values)
    return params


# ---------------------------------------------------------------------------
# forward

def _attention(x: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    dim = x.shape[1]
    head_dim = dim // heads
    qkv = ad.add_bias(ad.matmul(x, params[f"{prefix}.attn.qkv.weight"]), params[f"{prefix}.attn.qkv.bias"])
    q = ad.slice_cols(qkv, 0, dim)
    k = ad.slice_cols(qkv, dim, 2 * dim)
    v = ad.slice_cols(qkv, 2 * dim, 3 * dim)
    outs = []
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        att = ad.softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt))
        outs.append(ad.matmul(att, vh))
    merged = ad.concat_cols(outs) if heads > 1 else outs[0]
    return ad.add_bias(ad.matmul(merged, params[f"{prefix}.attn.proj.weight"]), params[f"{prefix}.attn.proj.bias"])


def _mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.gelu(ad.add_bias(ad.matmul(x, params[f"{prefix}.mlp.fc1.weight"]), params[f"{prefix}.mlp.fc1.bias"]))
    return ad.add_bias(ad.matmul(h, params[f"{prefix}.mlp.fc2.weight"]), params[f"{prefix}.mlp.fc2.bias"])


def _transformer_block(x: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    h = ad.layernorm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = ad.add(x, _attention(h, params, prefix, heads))
    h = ad.layernorm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return ad.add(x, _mlp(h, params, prefix))


def encode_patches(patches: np.ndarray, positions: np.ndarray, params: dict,
                   cfg: BackboneConfig, visible=None) -> LatentRepresentation:
    """Encoder over an explicit (patch matrix, positional encoding) pair.

    When `visible` indices are given, only those tokens are embedded and
    processed (MAE-style); the pooled vector is the mean of output tokens.
    """
    if visible is not None:
        visible = np.asarray(visible, dtype=np.intp)
        patches = patches[visible]
        positions = positions[visible]
    x = ad.add_bias(ad.matmul(Tensor(patches), params["backbone.patch_embed.weight"]),
                    params["backbone.patch_embed.bias"])
    x = ad.add(x, Tensor(positions))
    for i in range(cfg.layers):
        x = _transformer_block(x, params, f"backbone.blocks.{i}", cfg.heads)
    x = ad.layernorm(x, params["backbone.final_ln.gain"], params["backbone.final_ln.bias"])
    return LatentRepresentation(tokens=x, pooled=ad.mean_rows(x))


def encode(voxels: np.ndarray, params: dict, cfg: BackboneConfig, visible=None) -> LatentRepresentation:
    """Encode a [D, D, D] voxel array (already intensity-normalized)."""
    if voxels.shape != (cfg.volume_dim,) * 3:
        raise ConfigError(f"expected a {(cfg.volume_dim,) * 3} volume, got {voxels.shape}")
    patches = patchify(np.asarray(voxels, dtype=np.float64), cfg.patch)
    positions = sincos_positions(cfg.n_side, cfg.embed_dim)
    return encode_patches(patches, positions, params, cfg, visible=visible)


# ---------------------------------------------------------------------------
# MAE pretraining

def sample_mask(n_patches: int, mask_ratio: float, rng):
    """Choose ceil(mask_ratio * n) masked patch indices without replacement."""
    n_masked = math.ceil(mask_ratio * n_patches)
    if n_masked <= 0 or n_masked >= n_patches:
        raise ConfigError(f"mask_ratio {mask_ratio} leaves no masked or no visible patches of {n_patches}")
    masked = np.sort(rng.choice(n_patches, size=n_masked, replace=False))
    visible = np.setdiff1d(np.arange(n_patches), masked)
    return visible, masked


def reconstruct(latent_tokens: Tensor, visible, masked, params: dict, cfg: BackboneConfig) -> Tensor:
    """Decode visible-token latents plus mask tokens back to patch values."""
    proj = ad.add_bias(ad.matmul(latent_tokens, params["decoder.embed.weight"]), params["decoder.embed.bias"])
    mask_tokens = ad.tile_rows(params["decoder.mask_token"], len(masked))
    stacked = ad.concat_rows([proj, mask_tokens])
    order = np.concatenate([visible, masked])
    inverse = np.argsort(order)
    x = ad.take_rows(stacked, inverse)
    x = ad.add(x, Tensor(sincos_positions(cfg.n_side, cfg.decoder_dim)))
    for i in range(cfg.decoder_layers):
        x = _transformer_block(x, params, f"decoder.blocks.{i}", cfg.heads)
    x = ad.layernorm(x, params["decoder.final_ln.gain"], params["decoder.final_ln.bias"])
    return ad.add_bias(ad.matmul(x, params["decoder.pred.weight"]), params["decoder.pred.bias"])


def masked_reconstruction_loss(voxels: np.ndarray, params: dict, cfg: BackboneConfig, rng) -> Tensor:
    """Forward MAE loss for one volume: MSE over masked patches only."""
    patches = patchify(np.asarray(voxels, dtype=np.float64), cfg.patch)
    visible, masked = sample_mask(cfg.n_patches, cfg.mask_ratio, rng)
    latent = encode_patches(patches, sincos_positions(cfg.n_side, cfg.embed_dim), params, cfg, visible=visible)
    pred = reconstruct(latent.tokens, visible, masked, params, cfg)
    pred_masked = ad.take_rows(pred, masked)
    diff = ad.sub(pred_masked, Tensor(patches[masked]))
    return ad.mean_all(ad.mul(diff, diff))


def mae_pretrain_step(volumes, params: dict, cfg: BackboneConfig, rng) -> float:
    """One pretraining step over a batch of voxel arrays.

    Populates gradients on `params` (caller applies the optimizer step)
    and returns the batch loss.
    """
    with ad.Tape() as tape:
        total = None
        for voxels in volumes:
            loss = masked_reconstruction_loss(voxels, params, cfg, rng)
            total = loss if total is None else ad.add(total, loss)
        batch_loss = ad.scale(total, 1.0 / len(volumes))
        tape.backward(batch_loss)
    return batch_loss.item()
