"""3D ViT encoder, MAE decoder and CLS classification head.

All forward functions take batched patch rows of shape ``[B, n, patch_dim]``
(plain numpy; inputs never need gradients) and return autodiff tensors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, HeadDivisibility, IndexOutOfRange, ShapeMismatch
from .patching import MaskSelection, PatchGrid


@dataclass(frozen=True)
class ModelConfig:
    side: int = 32
    patch: int = 8
    enc_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_layers: int = 1
    dec_heads: int = 4
    mlp_ratio: int = 4
    n_classes: int = 4
    mask_after_encode: bool = False

    def __post_init__(self):
        PatchGrid(self.side, self.patch)
        for dim, heads, part in ((self.enc_dim, self.enc_heads, "encoder"),
                                 (self.dec_dim, self.dec_heads, "decoder")):
            if heads < 1 or dim % heads:
                raise HeadDivisibility(f"{part} width {dim} is not divisible by {heads} heads")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.enc_layers < 0 or self.dec_layers < 0 or self.mlp_ratio < 1:
            raise ConfigError("layer counts must be non-negative and mlp_ratio positive")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.side, self.patch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "paper": ModelConfig(128, 16, 768, 12, 12, 384, 4, 12),
    "desk": ModelConfig(32, 8, 64, 2, 4, 32, 1, 4),
    "tiny": ModelConfig(16, 8, 16, 1, 2, 8, 1, 2),
}


def sincos_3d(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed sinusoidal table ``[n_patches, dim]``.

    The width is split into three equal bands (x, y, z), each holding
    sin/cos pairs at geometrically spaced frequencies; leftover columns are 0.
    """
    return _sincos_cached(grid.side, grid.patch, dim).copy()


@lru_cache(maxsize=None)
def _sincos_cached(side, patch, dim):
    grid = PatchGrid(side, patch)
    nfreq = (dim // 3) // 2
    table = np.zeros((grid.n_patches, dim), dtype=np.float64)
    if nfreq == 0:
        return table
    omega = 1.0 / 10000.0 ** (np.arange(nfreq) / nfreq)
    coords = grid.coords().astype(np.float64)
    for axis in range(3):
        phase = coords[:, axis:axis + 1] * omega
        start = axis * 2 * nfreq
        table[:, start:start + nfreq] = np.sin(phase)
        table[:, start + nfreq:start + 2 * nfreq] = np.cos(phase)
    return table


class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: ad.Tensor(np.array(v), name=k) for k, v in arrays.items()})

    def copy(self, dtype=None) -> "ModelParams":
        out = {}
        for k, t in self.tensors.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out[k] = ad.Tensor(data, requires_grad=t.requires_grad, name=k)
        return ModelParams(self.config, out)

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for k, t in self.tensors.items():
            t.requires_grad = k in names
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def head_dtype(self):
        return self.tensors["head.weight"].dtype


def _trunc_normal(rng: np.random.Generator, shape, std=0.02):
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_shapes(prefix: str, dim: int, mlp_ratio: int):
    hidden = dim * mlp_ratio
    return [
        (f"{prefix}.norm1.gain", (dim,), "one"),
        (f"{prefix}.norm1.bias", (dim,), "zero"),
        (f"{prefix}.attn.wq", (dim, dim), "w"),
        (f"{prefix}.attn.bq", (dim,), "zero"),
        (f"{prefix}.attn.wk", (dim, dim), "w"),
        (f"{prefix}.attn.bk", (dim,), "zero"),
        (f"{prefix}.attn.wv", (dim, dim), "w"),
        (f"{prefix}.attn.bv", (dim,), "zero"),
        (f"{prefix}.attn.wo", (dim, dim), "w"),
        (f"{prefix}.attn.bo", (dim,), "zero"),
        (f"{prefix}.norm2.gain", (dim,), "one"),
        (f"{prefix}.norm2.bias", (dim,), "zero"),
        (f"{prefix}.mlp.w1", (dim, hidden), "w"),
        (f"{prefix}.mlp.b1", (hidden,), "zero"),
        (f"{prefix}.mlp.w2", (hidden, dim), "w"),
        (f"{prefix}.mlp.b2", (dim,), "zero"),
    ]


def param_shapes(cfg: ModelConfig):
    """``(name, shape, init_kind)`` for every parameter, in creation order."""
    pd, E, D = cfg.grid.patch_dim, cfg.enc_dim, cfg.dec_dim
    shapes = [
        ("patch_embed.weight", (pd, E), "w"),
        ("patch_embed.bias", (E,), "zero"),
        ("cls_token", (E,), "w"),
    ]
    for i in range(cfg.enc_layers):
        shapes += _block_shapes(f"enc.{i}", E, cfg.mlp_ratio)
    shapes += [
        ("enc.norm.gain", (E,), "one"),
        ("enc.norm.bias", (E,), "zero"),
        ("dec.embed.weight", (E, D), "w"),
        ("dec.embed.bias", (D,), "zero"),
        ("mask_token", (D,), "w"),
    ]
    for i in range(cfg.dec_layers):
        shapes += _block_shapes(f"dec.{i}", D, cfg.mlp_ratio)
    shapes += [
        ("dec.norm.gain", (D,), "one"),
        ("dec.norm.bias", (D,), "zero"),
        ("dec.pred.weight", (D, pd), "w"),
        ("dec.pred.bias", (pd,), "zero"),
        ("head.feat_mean", (E,), "zero"),
        ("head.feat_scale", (E,), "one"),
        ("head.norm.gain", (E,), "one"),
        ("head.norm.bias", (E,), "zero"),
        ("head.weight", (E, cfg.n_classes), "w"),
        ("head.bias", (cfg.n_classes,), "zero"),
    ]
    return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_shapes(config):
        if kind == "w":
            data = _trunc_normal(rng, shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = ad.Tensor(data.astype(dtype), name=name)
    return ModelParams(config, tensors)


HEAD_PARAMS = ("head.norm.gain", "head.norm.bias", "head.weight", "head.bias")
# fixed per-feature standardization of the CLS output, never trained
BUFFERS = ("head.feat_mean", "head.feat_scale")


def trainable_subset(params: ModelParams, mode: str) -> List[str]:
    """Names updated in fine-tuning (``FT``: everything) or linear probing (``LP``: head only)."""
    if mode == "FT":
        return [k for k in params.names() if k not in BUFFERS]
    if mode == "LP":
        return list(HEAD_PARAMS)
    raise ConfigError(f"unknown fine-tuning mode {mode!r}")


# -- forward -----------------------------------------------------------------

def _block(params: ModelParams, prefix: str, x: ad.Tensor, heads: int) -> ad.Tensor:
    p = params.tensors
    h = ad.layernorm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"])
    h = ad.multihead_attention(
        h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.wv"],
        p[f"{prefix}.attn.wo"], heads,
        bq=p[f"{prefix}.attn.bq"], bk=p[f"{prefix}.attn.bk"],
        bv=p[f"{prefix}.attn.bv"], bo=p[f"{prefix}.attn.bo"])
    x = ad.add(x, h)
    h = ad.layernorm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
    h = ad.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return ad.add(x, h)


def _as_batch(rows, cfg: ModelConfig) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.ndim == 2:
        rows = rows[None]
    grid = cfg.grid
    if rows.ndim != 3 or rows.shape[1:] != (grid.n_patches, grid.patch_dim):
        raise ShapeMismatch(
            f"patch rows must be [B, {grid.n_patches}, {grid.patch_dim}], got {rows.shape}")
    return rows


def _check_keep(keep: np.ndarray, n: int) -> np.ndarray:
    keep = np.asarray(keep, dtype=np.int64)
    if keep.ndim == 1:
        keep = keep[None]
    if keep.size and (keep.min() < 0 or keep.max() >= n):
        raise IndexOutOfRange(f"patch indices must lie in [0, {n})")
    if keep.shape[1] > 1 and not (np.diff(keep, axis=1) > 0).all():
        raise IndexOutOfRange("kept patch indices must be strictly increasing")
    return keep


def encode_batch(params: ModelParams, rows: np.ndarray, keep: Optional[np.ndarray],
                 with_cls: bool) -> ad.Tensor:
    """Encode ``rows[B, n, pd]`` restricted to ``keep[B, k]`` (all patches when None)."""
    cfg = params.config
    p = params.tensors
    rows = _as_batch(rows, cfg)
    B, n, _ = rows.shape
    dtype = params.head_dtype()
    if keep is None:
        keep = np.broadcast_to(np.arange(n), (B, n))
    keep = _check_keep(keep, n)
    if keep.shape[0] != B:
        raise ShapeMismatch(f"{keep.shape[0]} index lists for a batch of {B}")
    picked = np.take_along_axis(rows, keep[..., None], axis=1).astype(dtype, copy=False)
    pos = sincos_3d(cfg.grid, cfg.enc_dim).astype(dtype)[keep]
    x = ad.add(ad.linear(ad.Tensor(picked), p["patch_embed.weight"], p["patch_embed.bias"]), pos)
    if with_cls:
        cls = ad.broadcast_to(ad.reshape(p["cls_token"], (1, 1, cfg.enc_dim)), (B, 1, cfg.enc_dim))
        x = ad.concat([cls, x], axis=1)
    for i in range(cfg.enc_layers):
        x = _block(params, f"enc.{i}", x, cfg.enc_heads)
    return ad.layernorm(x, p["enc.norm.gain"], p["enc.norm.bias"])


def encode(params: ModelParams, patch_rows, keep, with_cls: bool) -> ad.Tensor:
    """Single-volume encoder: returns ``[(len(keep) + with_cls), enc_dim]``."""
    rows = np.asarray(patch_rows)
    keep = _check_keep(np.asarray(keep), rows.shape[0])
    out = encode_batch(params, rows[None], keep, with_cls)
    return ad.reshape(out, out.shape[1:])


def decode_batch(params: ModelParams, encoded_visible: ad.Tensor, visible: np.ndarray) -> ad.Tensor:
    """Reconstruct every patch row from encoded visible tokens ``[B, k, enc_dim]``."""
    cfg = params.config
    p = params.tensors
    n = cfg.grid.n_patches
    visible = _check_keep(visible, n)
    if encoded_visible.ndim != 3 or encoded_visible.shape[:2] != visible.shape:
        raise ShapeMismatch(
            f"encoded tokens {encoded_visible.shape} do not match visible indices {visible.shape}")
    y = ad.linear(encoded_visible, p["dec.embed.weight"], p["dec.embed.bias"])
    x = ad.scatter_rows(y, visible, p["mask_token"], n)
    x = ad.add(x, sincos_3d(cfg.grid, cfg.dec_dim).astype(params.head_dtype()))
    for i in range(cfg.dec_layers):
        x = _block(params, f"dec.{i}", x, cfg.dec_heads)
    x = ad.layernorm(x, p["dec.norm.gain"], p["dec.norm.bias"])
    return ad.linear(x, p["dec.pred.weight"], p["dec.pred.bias"])


def decode_reconstruct(params: ModelParams, encoded_visible: ad.Tensor,
                       selection: MaskSelection) -> ad.Tensor:
    """Single-volume decoder: ``[n_patches, patch_dim]`` reconstruction."""
    enc = encoded_visible if encoded_visible.ndim == 3 else ad.reshape(
        encoded_visible, (1,) + encoded_visible.shape)
    out = decode_batch(params, enc, np.asarray(selection.visible)[None])
    return ad.reshape(out, out.shape[1:])


def reconstruct_batch(params: ModelParams, rows: np.ndarray, visible: np.ndarray) -> ad.Tensor:
    """Masked-autoencoder forward pass: ``[B, n, patch_dim]`` reconstructions.

    By default only visible patches enter the encoder. With
    ``config.mask_after_encode`` all patches are encoded and the masked
    positions are swapped for the mask token before decoding.
    """
    visible = _check_keep(visible, params.config.grid.n_patches)
    if params.config.mask_after_encode:
        enc = ad.gather_rows(encode_batch(params, rows, None, with_cls=False), visible)
    else:
        enc = encode_batch(params, rows, visible, with_cls=False)
    return decode_batch(params, enc, visible)


def cls_features(params: ModelParams, rows: np.ndarray) -> ad.Tensor:
    """Encoded CLS token for every volume in the batch, ``[B, enc_dim]``."""
    enc = encode_batch(params, rows, None, with_cls=True)
    B = enc.shape[0]
    first = ad.gather_rows(enc, np.zeros((B, 1), dtype=np.int64))
    return ad.reshape(first, (B, params.config.enc_dim))


def set_feature_standardization(params: ModelParams, features: np.ndarray, eps: float = 1e-6) -> None:
    """Fit the head's fixed standardization buffers to a set of CLS features."""
    f = np.asarray(features, dtype=np.float64)
    dtype = params.head_dtype()
    params.tensors["head.feat_mean"].data = f.mean(axis=0).astype(dtype)
    params.tensors["head.feat_scale"].data = (1.0 / (f.std(axis=0) + eps)).astype(dtype)


def head_logits(params: ModelParams, features) -> ad.Tensor:
    """Standardize CLS features with the fixed buffers, then layernorm and linear."""
    p = params.tensors
    f = ad.mul(ad.sub(ad.as_tensor(features), p["head.feat_mean"]), p["head.feat_scale"])
    h = ad.layernorm(f, p["head.norm.gain"], p["head.norm.bias"])
    return ad.linear(h, p["head.weight"], p["head.bias"])


def classify_batch(params: ModelParams, rows: np.ndarray) -> ad.Tensor:
    return head_logits(params, cls_features(params, rows))


def classify(params: ModelParams, patch_rows) -> ad.Tensor:
    """Logits ``[n_classes]`` for one volume's patch rows."""
    out = classify_batch(params, np.asarray(patch_rows)[None])
    return ad.reshape(out, (params.config.n_classes,))
