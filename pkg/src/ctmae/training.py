"""Losses, AdamW with warmup-cosine schedule, training loops and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptChecksum,
    DimMismatch,
    IoFailure,
    NegativeAlpha,
    ShapeMismatch,
    VersionMismatch,
    ZeroClassCount,
)
from .patching import LungPartition, MaskSelection, PatchGrid, lung_partition, patchify, sample_mask

log = logging.getLogger(__name__)

MODALITIES = ("PT", "FT", "LP")
LOSS_VARIANTS = ("standard_mae", "lung_aware")


@dataclass(frozen=True)
class RunConfig:
    modality: str = "PT"
    batch_size: int = 4
    base_lr: float = 1e-3
    weight_decay: float = 5e-2
    total_iters: int = 300
    warmup_fraction: float = 0.1
    loss_variant: str = "standard_mae"
    alpha: float = 0.01
    mask_ratio: float = 0.75
    seed: int = 0
    augmentation: bool = True
    lung_threshold: float = 0.25
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.batch_size < 1 or self.total_iters < 1 or not self.base_lr > 0:
            raise ConfigError("batch_size, total_iters and base_lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.alpha < 0:
            raise NegativeAlpha(f"alpha must be non-negative, got {self.alpha}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0 <= self.lung_threshold <= 1:
            raise ConfigError("lung_threshold must lie in [0, 1]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# Full-scale training configurations, plus desk-scale runs.
RUN_PRESETS = {
    "paper-pt": RunConfig("PT", 64, 3e-4, 5e-2, 198_000, 0.1, augmentation=True),
    "paper-ft": RunConfig("FT", 12, 1e-4, 1e-4, 95, 0.1, augmentation=False),
    "paper-lp": RunConfig("LP", 12, 1e-2, 1e-2, 620, 0.1, augmentation=False),
    # desk pretraining uses the lung-aware loss at the figure's alpha of 0.1
    "desk-pt": RunConfig("PT", 4, 1e-3, 5e-2, 300, 0.1, loss_variant="lung_aware", alpha=0.1,
                         augmentation=True),
    "desk-ft": RunConfig("FT", 8, 1e-3, 1e-4, 1000, 0.1, augmentation=False),
    "desk-lp": RunConfig("LP", 8, 1e-2, 1e-2, 300, 0.1, augmentation=False),
}


# -- schedule and optimizer --------------------------------------------------

def warmup_iters(config: RunConfig) -> int:
    return int(math.floor(config.warmup_fraction * config.total_iters))


def lr_at(it: int, config: RunConfig) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""
    W = warmup_iters(config)
    if it < W:
        return config.base_lr * (it + 1) / W
    span = config.total_iters - W
    frac = min(max(it - W, 0), span) / span
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: M.ModelParams, grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """One in-place AdamW update of the parameters named in ``grads``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * weight_decay)
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = data.astype(p.data.dtype, copy=False)


# -- classification helpers --------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    weights: tuple
    N: int
    n: tuple


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """``w_i = N / n_i`` for per-class sample counts."""
    counts = tuple(int(c) for c in counts)
    if any(c < 1 for c in counts):
        raise ZeroClassCount(f"every class needs at least one sample, got counts {counts}")
    N = sum(counts)
    return ClassWeights(tuple(N / c for c in counts), N, counts)


def binary_merge(labels4: Sequence[int]) -> List[int]:
    """UIP and probable UIP -> 0; indeterminate and non-IPF -> 1."""
    out = []
    for y in labels4:
        if y not in (0, 1, 2, 3):
            raise ConfigError(f"4-way label must be 0..3, got {y}")
        out.append(0 if y < 2 else 1)
    return out


# -- reconstruction losses ---------------------------------------------------

def mae_loss(recon, target_rows, selection: MaskSelection) -> ad.Tensor:
    """Mean absolute error over the masked patch rows only."""
    return ad.mean_abs_error(ad.as_tensor(recon), target_rows, selection.masked)


def lung_aware_loss(recon, target_rows, selection: MaskSelection, partition: LungPartition,
                    alpha: float) -> ad.Tensor:
    """``E_lung + alpha * E_non_lung`` over the masked rows of each region."""
    if alpha < 0:
        raise NegativeAlpha(f"alpha must be non-negative, got {alpha}")
    recon = ad.as_tensor(recon)
    lung = set(partition.lung)
    masked_lung = [k for k in selection.masked if k in lung]
    masked_other = [k for k in selection.masked if k not in lung]
    e_lung = ad.mean_abs_error(recon, target_rows, masked_lung)
    e_other = ad.mean_abs_error(recon, target_rows, masked_other)
    return ad.add(e_lung, ad.mul_scalar(e_other, alpha))


def row_weights(selection: MaskSelection, n: int, variant: str = "standard_mae",
                partition: Optional[LungPartition] = None, alpha: float = 0.0) -> np.ndarray:
    """Per-row weights turning a sum of row-mean errors into either loss variant."""
    w = np.zeros(n)
    masked = np.asarray(selection.masked, dtype=np.int64)
    if variant == "standard_mae":
        if masked.size:
            w[masked] = 1.0 / masked.size
        return w
    if partition is None:
        raise ConfigError("the lung-aware loss needs a lung partition")
    is_lung = np.zeros(n, dtype=bool)
    is_lung[list(partition.lung)] = True
    ml = masked[is_lung[masked]]
    mn = masked[~is_lung[masked]]
    if ml.size:
        w[ml] = 1.0 / ml.size
    if mn.size:
        w[mn] = alpha / mn.size
    return w


def weighted_reconstruction_loss(recon: ad.Tensor, target: np.ndarray, weights: np.ndarray) -> ad.Tensor:
    """Batch mean of ``sum_k weights[b, k] * mean|recon[b, k] - target[b, k]|``."""
    B = recon.shape[0]
    err = ad.mean(ad.absolute(ad.sub(recon, target.astype(recon.dtype, copy=False))), axis=2)
    return ad.mul_scalar(ad.tsum(ad.mul(err, weights.astype(recon.dtype))), 1.0 / B)


# -- data --------------------------------------------------------------------

@dataclass(frozen=True)
class Item:
    volume: np.ndarray
    mask: np.ndarray
    label: Optional[int] = None


def load_items(records, side: Optional[int] = None) -> List[Item]:
    """Read preprocessed cubes and masks listed in manifest records."""
    from .volume_io import read_mask, read_nifti

    items = []
    for rec in records:
        v = read_nifti(rec.scan)
        if side is not None and v.dims != (side,) * 3:
            raise DimMismatch(f"{rec.scan}: expected a {side}^3 cube, got {v.dims}")
        m = read_mask(rec.mask, v.dims)
        items.append(Item(np.array(v.data), np.array(m.data), rec.label))
    return items


def derive_seed(*counters: int) -> int:
    """64-bit seed from a tuple of non-negative counters (run seed, iteration, item, stream)."""
    return int(np.random.SeedSequence([int(c) for c in counters]).generate_state(1, np.uint64)[0])


STREAM_BATCH, STREAM_AUG, STREAM_MASK = 1, 2, 3


def augment(volume: np.ndarray, mask: np.ndarray, seed: int):
    """Random axis flips (p = 0.5 each, shared with the mask) and x U(0.95, 1.05) jitter."""
    rng = np.random.default_rng(seed)
    flips = rng.random(3) < 0.5
    jitter = rng.uniform(0.95, 1.05)
    return apply_augmentation(volume, mask, flips, jitter)


def apply_augmentation(volume, mask, flips, jitter: float):
    axes = tuple(i for i, f in enumerate(flips) if f)
    v, m = np.asarray(volume), np.asarray(mask)
    if axes:
        v, m = np.flip(v, axes), np.flip(m, axes)
    v = np.clip(v * np.float32(jitter), 0.0, 1.0).astype(np.float32)
    return v, np.ascontiguousarray(m)


def batch_indices(n_items: int, batch_size: int, it: int, seed: int) -> np.ndarray:
    """Items for iteration ``it``: consecutive slices of per-epoch shuffles."""
    start = it * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n_items)
        perm = np.random.default_rng(derive_seed(seed, epoch, STREAM_BATCH)).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.asarray(out, dtype=np.int64)


# -- training loops ----------------------------------------------------------

@dataclass
class TrainResult:
    params: M.ModelParams
    state: OptimizerState
    log: List[tuple]
    history: List[dict] = field(default_factory=list)


def _grads_by_name(params: M.ModelParams) -> Dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.tensors.items() if t.requires_grad and t.grad is not None}


def pretrain_step_loss(params: M.ModelParams, items: Sequence[Item], run: RunConfig, it: int,
                       idx: Sequence[int]) -> ad.Tensor:
    """Masked-reconstruction loss of one batch (augment, patchify, mask, encode, decode)."""
    grid = params.config.grid
    rows, weights, visible = [], [], []
    for slot, i in enumerate(idx):
        vol, msk = items[i].volume, items[i].mask
        if run.augmentation:
            vol, msk = augment(vol, msk, derive_seed(run.seed, it, slot, STREAM_AUG))
        sel = sample_mask(grid.n_patches, run.mask_ratio, derive_seed(run.seed, it, slot, STREAM_MASK))
        part = lung_partition(msk, grid, run.lung_threshold) if run.loss_variant == "lung_aware" else None
        rows.append(patchify(vol, grid))
        weights.append(row_weights(sel, grid.n_patches, run.loss_variant, part, run.alpha))
        visible.append(sel.visible)
    rows = np.stack(rows).astype(params.head_dtype())
    recon = M.reconstruct_batch(params, rows, np.asarray(visible))
    return weighted_reconstruction_loss(recon, rows, np.stack(weights))


def pretrain(items: Sequence[Item], run: RunConfig, model_config: M.ModelConfig,
             init: Optional[M.ModelParams] = None, out_dir=None,
             on_iter: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Masked-autoencoder pretraining.

    Returns the trained parameters, optimizer state and a loss log of
    ``(iter, lr, loss)`` tuples. With ``out_dir`` set, writes ``loss.csv``
    and checkpoints every ``run.checkpoint_every`` iterations plus a final one.
    """
    if not items:
        raise ConfigError("pretraining needs at least one item")
    params = init if init is not None else M.init_params(model_config, run.seed)
    params.set_trainable(params.names())
    state = OptimizerState()
    records = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        curve = open(out_dir / "loss.csv", "w")
    try:
        for it in range(run.total_iters):
            idx = batch_indices(len(items), run.batch_size, it, run.seed)
            params.zero_grad()
            loss = pretrain_step_loss(params, items, run, it, idx)
            ad.backward(loss)
            lr = lr_at(it, run)
            adamw_step(params, _grads_by_name(params), state, lr, run.weight_decay)
            rec = (it, lr, float(loss.item()))
            records.append(rec)
            if out_dir is not None:
                curve.write(format_log_line(*rec) + "\n")
                if (it + 1) % run.checkpoint_every == 0 and it + 1 < run.total_iters:
                    save_checkpoint(out_dir / f"ckpt_{it + 1:06d}.ctmae", params, state, run, it + 1)
            if on_iter is not None:
                on_iter(*rec)
    finally:
        if out_dir is not None:
            curve.close()
    params.zero_grad()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ctmae", params, state, run, run.total_iters)
    return TrainResult(params, state, records)


def format_log_line(it: int, lr: float, loss: float) -> str:
    return f"{it},{lr!r},{loss!r}"


def _rows(items: Sequence[Item], grid: PatchGrid, dtype) -> np.ndarray:
    return np.stack([patchify(it.volume, grid) for it in items]).astype(dtype)


def extract_features(params: M.ModelParams, items: Sequence[Item]) -> np.ndarray:
    """Frozen encoder CLS features, computed one volume at a time."""
    grid = params.config.grid
    return np.concatenate([
        M.cls_features(params, _rows([it], grid, params.head_dtype())).data for it in items])


def predict_logits(params: M.ModelParams, items: Sequence[Item]) -> np.ndarray:
    return np.asarray(M.head_logits(params, extract_features(params, items)).data)


def finetune(items: Sequence[Item], run: RunConfig, model_config: M.ModelConfig,
             init: Optional[M.ModelParams], mode: str = "FT",
             val_items: Sequence[Item] = (), labels: Optional[Sequence[int]] = None,
             val_labels: Optional[Sequence[int]] = None,
             standardize: Optional[bool] = None) -> TrainResult:
    """Supervised training of the CLS head (``LP``) or the whole network (``FT``).

    In ``LP`` mode the head's standardization buffers are first fitted to the
    frozen encoder's CLS features on the training items; ``standardize``
    forces this on or off for either mode. Class weights come from the
    training labels only. ``labels`` overrides the items' own labels (used
    for the binary task). Validation loss and metrics
    are recorded once per epoch in ``history``.
    """
    from .evaluation import confusion_matrix, balanced_accuracy, weighted_f1

    if not items:
        raise ConfigError("fine-tuning needs at least one labelled item")
    labels = np.asarray([it.label for it in items] if labels is None else labels, dtype=np.int64)
    if val_items and val_labels is None:
        val_labels = [it.label for it in val_items]
    C = model_config.n_classes
    if labels.min() < 0 or labels.max() >= C:
        raise ConfigError(f"labels must lie in [0, {C})")
    weights = np.asarray(class_weights(np.bincount(labels, minlength=C)).weights)

    params = init.copy() if init is not None else M.init_params(model_config, run.seed)
    if params.config.n_classes != C:
        raise VersionMismatch("initial parameters were built for a different class count")
    trainable = M.trainable_subset(params, mode)
    params.set_trainable(trainable)
    state = OptimizerState()
    grid = model_config.grid
    dtype = params.head_dtype()

    if standardize is None:
        standardize = mode == "LP"
    feats = extract_features(params, items) if standardize or mode == "LP" else None
    if standardize:
        M.set_feature_standardization(params, feats)
    if mode == "LP":
        val_feats = extract_features(params, val_items) if val_items else None

    def logits_for(idx):
        if mode == "LP":
            return M.head_logits(params, feats[idx])
        return M.classify_batch(params, _rows([items[i] for i in idx], grid, dtype))

    def val_logits():
        if mode == "LP":
            return np.asarray(M.head_logits(params, val_feats).data)
        return predict_logits(params, val_items)

    steps_per_epoch = max(1, math.ceil(len(items) / run.batch_size))
    records, history = [], []
    for it in range(run.total_iters):
        idx = batch_indices(len(items), run.batch_size, it, run.seed)
        params.zero_grad()
        loss = ad.cross_entropy_weighted(logits_for(idx), labels[idx], weights)
        ad.backward(loss)
        lr = lr_at(it, run)
        adamw_step(params, _grads_by_name(params), state, lr, run.weight_decay)
        records.append((it, lr, float(loss.item())))
        if val_items and ((it + 1) % steps_per_epoch == 0 or it + 1 == run.total_iters):
            vl = val_logits()
            vloss = ad.cross_entropy_weighted(ad.Tensor(vl), val_labels, weights).item()
            cm = confusion_matrix(val_labels, vl.argmax(axis=1), C)
            history.append({"iter": it + 1, "val_loss": vloss,
                            "balanced_accuracy": balanced_accuracy(cm), "weighted_f1": weighted_f1(cm)})
    params.zero_grad()
    return TrainResult(params, state, records, history)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CTMAE\x00\x00\x01"
CKPT_FORMAT = 1


@dataclass
class Checkpoint:
    params: M.ModelParams
    state: OptimizerState
    run: Optional[RunConfig]
    iteration: int


def encode_checkpoint(params: M.ModelParams, state: Optional[OptimizerState],
                      run: Optional[RunConfig], iteration: int) -> bytes:
    state = state if state is not None else OptimizerState()
    blobs, directory, offset = [], [], 0
    named = [(f"param/{k}", t.data) for k, t in params.tensors.items()]
    named += [(f"adam_m/{k}", a) for k, a in state.m.items()]
    named += [(f"adam_v/{k}", a) for k, a in state.v.items()]
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "format": CKPT_FORMAT,
        "model_config": params.config.to_dict(),
        "model_digest": params.config.digest(),
        "run_config": run.to_dict() if run is not None else None,
        "iteration": int(iteration),
        "optimizer": {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "tensors": directory,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, params: M.ModelParams, state: Optional[OptimizerState] = None,
                    run: Optional[RunConfig] = None, iteration: int = 0) -> None:
    blob = encode_checkpoint(params, state, run, iteration)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def decode_checkpoint(blob: bytes, expected: Optional[M.ModelConfig] = None) -> Checkpoint:
    if len(blob) < len(CKPT_MAGIC) + 12:
        raise CorruptChecksum("checkpoint is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptChecksum("checkpoint CRC-32 mismatch")
    if body[:8] != CKPT_MAGIC:
        raise VersionMismatch("not a ctmae checkpoint (bad magic)")
    (meta_len,) = struct.unpack_from("<Q", body, 8)
    try:
        meta = json.loads(body[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptChecksum(f"unreadable checkpoint metadata: {exc}") from exc
    if meta.get("format") != CKPT_FORMAT:
        raise VersionMismatch(f"checkpoint format {meta.get('format')} is not supported")
    try:
        config = M.ModelConfig(**meta["model_config"])
    except TypeError as exc:
        raise VersionMismatch(f"checkpoint model config is incompatible: {exc}") from exc
    if config.digest() != meta["model_digest"]:
        raise VersionMismatch("model config digest does not match its config")
    if expected is not None and expected.digest() != config.digest():
        raise VersionMismatch(
            f"checkpoint was built for {config.to_dict()}, expected {expected.to_dict()}")
    payload = body[16 + meta_len:]
    arrays = {}
    for entry in meta["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CorruptChecksum(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        arrays[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    params = M.ModelParams.from_arrays(
        config, {k[6:]: a for k, a in arrays.items() if k.startswith("param/")})
    expected_names = [name for name, _, _ in M.param_shapes(config)]
    if params.names() != expected_names:
        raise VersionMismatch("checkpoint parameter set does not match its model config")
    opt = meta["optimizer"]
    state = OptimizerState(
        m={k[7:]: a for k, a in arrays.items() if k.startswith("adam_m/")},
        v={k[7:]: a for k, a in arrays.items() if k.startswith("adam_v/")},
        step=opt["step"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
    run = RunConfig(**meta["run_config"]) if meta["run_config"] else None
    return Checkpoint(params, state, run, meta["iteration"])


def load_checkpoint(path, expected: Optional[M.ModelConfig] = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob, expected)
