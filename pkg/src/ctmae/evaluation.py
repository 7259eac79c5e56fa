"""Classification metrics and the repeated stratified 70:30 split protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, LabelOutOfRange

N_SPLITS = 5
TRAIN_FRACTION = (7, 10)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts ``cm[true, predicted]``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ConfigError("y_true and y_pred differ in length")
    for y in (y_true, y_pred):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def balanced_accuracy(cm) -> float:
    """Mean per-class recall over classes that have support."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        return 0.0
    return float((np.diag(cm)[present] / support[present]).mean())


def weighted_f1(cm) -> float:
    """Support-weighted F1; a class with precision + recall = 0 scores 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    N = support.sum()
    if N == 0:
        return 0.0
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((support / N * f1).sum())


@dataclass(frozen=True)
class Split:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    seed: int


def _train_count(n: int) -> int:
    # 70% rounded half-up, in integer arithmetic
    num, den = TRAIN_FRACTION
    return (num * n * 2 + den) // (2 * den)


def class_train_counts(counts: Sequence[int]) -> List[int]:
    """Per-class training counts: 70% of each class rounded to nearest, then the
    largest class absorbs any difference from 70% of the total."""
    counts = [int(c) for c in counts]
    train = [min(max(_train_count(c), 1 if c else 0), c) for c in counts]
    target = _train_count(sum(counts))
    big = int(np.argmax(counts))
    train[big] = min(max(train[big] + target - sum(train), 0), counts[big])
    return train


def make_splits(labels: Sequence[int], seed_base: int = 0, n_splits: int = N_SPLITS) -> List[Split]:
    """``n_splits`` stratified 70:30 partitions using seeds ``seed_base + s``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigError("cannot split an empty label list")
    classes = np.unique(labels)
    counts = [int((labels == c).sum()) for c in classes]
    per_class = class_train_counts(counts)
    plan = []
    for s in range(n_splits):
        seed = seed_base + s
        rng = np.random.default_rng(seed)
        train, val = [], []
        for c, k in zip(classes, per_class):
            members = np.flatnonzero(labels == c)
            members = members[rng.permutation(members.size)]
            train.extend(members[:k].tolist())
            val.extend(members[k:].tolist())
        plan.append(Split(tuple(sorted(train)), tuple(sorted(val)), seed))
    return plan


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for one value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("nothing to aggregate")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


@dataclass(frozen=True)
class SplitResult:
    split: int
    balanced_accuracy: float
    weighted_f1: float
    val_loss: float
    train_balanced_accuracy: float


def format_report(results: Sequence[SplitResult]) -> str:
    lines = ["split,balanced_accuracy,weighted_f1,val_loss"]
    for r in results:
        lines.append(f"{r.split},{r.balanced_accuracy!r},{r.weighted_f1!r},{r.val_loss!r}")
    cols = [aggregate([getattr(r, k) for r in results])
            for k in ("balanced_accuracy", "weighted_f1", "val_loss")]
    lines.append("mean ± std," + ",".join(f"{m:.4f} ± {s:.4f}" for m, s in cols))
    return "\n".join(lines) + "\n"


def run_protocol(items, run, model_config, init, mode: str, labels=None,
                 seed_base: int = 0, n_splits: int = N_SPLITS) -> List[SplitResult]:
    """Fine-tune (or linear-probe) one model per split and score it on validation."""
    from . import autodiff as ad
    from .training import class_weights, finetune, predict_logits

    labels = [it.label for it in items] if labels is None else list(labels)
    results = []
    for s, split in enumerate(make_splits(labels, seed_base, n_splits)):
        tr = [items[i] for i in split.train]
        va = [items[i] for i in split.val]
        ytr = [labels[i] for i in split.train]
        yva = [labels[i] for i in split.val]
        res = finetune(tr, run.replace(seed=run.seed + s), model_config, init, mode,
                       labels=ytr)
        C = model_config.n_classes
        w = class_weights(np.bincount(ytr, minlength=C)).weights
        vl = predict_logits(res.params, va)
        tl = predict_logits(res.params, tr)
        cm = confusion_matrix(yva, vl.argmax(axis=1), C)
        results.append(SplitResult(
            s, balanced_accuracy(cm), weighted_f1(cm),
            float(ad.cross_entropy_weighted(ad.Tensor(vl), yva, w).item()),
            balanced_accuracy(confusion_matrix(ytr, tl.argmax(axis=1), C))))
    return results
