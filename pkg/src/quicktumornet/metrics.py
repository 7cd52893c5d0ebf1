"""Evaluation surface: Dice, confusion matrix, ROC/AUC, accuracy, timing.

Per-slice Dice is collected only for slices whose ground truth contains the
class; the foreground mean pools every (slice, class>0) Dice value with
equal weight. ROC curves are computed per class one-vs-rest on the per-pixel
softmax scores, subsampled (seeded) above ``max_samples`` pixels.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .data import NUM_CLASSES, ManifestRow, load_sample, resize_sample


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class EvalReport:
    dice_values: dict[int, list[float]]
    confusion: np.ndarray
    roc: dict[int, RocCurve]
    accuracy: float
    ms_per_slice: float
    fingerprint: str

    def to_dict(self) -> dict:
        dice = {}
        for c in range(NUM_CLASSES):
            values = self.dice_values.get(c, [])
            dice[str(c)] = {
                "mean": float(np.mean(values)) if values else None,
                "std": float(np.std(values)) if values else None,
                "n_slices": len(values),
            }
        foreground = [v for c in range(1, NUM_CLASSES) for v in self.dice_values.get(c, [])]
        dice["foreground_mean"] = float(np.mean(foreground)) if foreground else None
        return {
            "dice": dice,
            "confusion": {
                "counts": self.confusion.tolist(),
                "row_percent": row_normalized(self.confusion).tolist(),
            },
            "roc": {
                str(c): {"auc": curve.auc, "n_points": int(len(curve.fpr))}
                for c, curve in self.roc.items()
            },
            "accuracy": self.accuracy,
            "ms_per_slice": self.ms_per_slice,
            "fingerprint": self.fingerprint,
        }


def dice_per_class(pred: np.ndarray, true: np.ndarray, class_id: int) -> float | None:
    """2|A∩B| / (|A|+|B|); None when the class is absent from the truth."""
    if pred.shape != true.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {true.shape}")
    a = pred == class_id
    b = true == class_id
    nb = int(b.sum())
    if nb == 0:
        return None
    na = int(a.sum())
    return 2.0 * int((a & b).sum()) / (na + nb)


def confusion_matrix(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Pixel counts, rows = ground truth class, columns = predicted class."""
    if pred.shape != true.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {true.shape}")
    flat = true.astype(np.int64).ravel() * NUM_CLASSES + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=NUM_CLASSES * NUM_CLASSES).reshape(
        NUM_CLASSES, NUM_CLASSES
    )


def row_normalized(counts: np.ndarray) -> np.ndarray:
    """Rows as percentages; empty rows stay zero."""
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(
        100.0 * counts, sums, out=np.zeros(counts.shape, dtype=np.float64), where=sums > 0
    )


def pixel_accuracy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix holds no pixels")
    return float(np.trace(counts) / total)


def roc_curve(
    scores: np.ndarray,
    truth: np.ndarray,
    class_id: int,
    max_samples: int = 1_000_000,
    seed: int = 0,
) -> RocCurve:
    """Threshold sweep over descending scores with tied scores grouped.

    The trapezoid area then equals the probability that a random positive
    outscores a random negative, ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must align")
    if scores.size > max_samples:
        keep = np.random.default_rng(seed).choice(scores.size, size=max_samples, replace=False)
        scores = scores[keep]
        truth = truth[keep]
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"class {class_id}: ROC needs both positive and negative pixels "
            f"(got {n_pos} positives, {n_neg} negatives)"
        )
    order = np.argsort(-scores, kind="stable")
    sorted_truth = truth[order]
    sorted_scores = scores[order]
    boundaries = np.nonzero(np.diff(sorted_scores))[0]  # last index of each tie group
    ends = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(sorted_truth)[ends]
    fp = ends + 1 - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return RocCurve(fpr=fpr, tpr=tpr, auc=float(np.trapezoid(tpr, fpr)))


def dataset_fingerprint(rows: list[ManifestRow], base_dir: str) -> str:
    """SHA-256 over the evaluated rows' file names and contents."""
    digest = hashlib.sha256()
    for row in rows:
        for ref in (row.image, row.mask):
            resolved = ref if os.path.isabs(ref) else os.path.join(base_dir, ref)
            digest.update(os.path.basename(ref).encode("utf-8"))
            with open(resolved, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def evaluate(
    model,
    rows: list[ManifestRow],
    base_dir: str,
    max_roc_samples: int = 1_000_000,
    seed: int = 0,
    clock=time.perf_counter,
) -> EvalReport:
    """Infer-mode forward per slice at the model's input size, all metrics."""
    if not rows:
        raise ValueError("cannot evaluate an empty split")
    size = model.config.input_size
    dtype = next(iter(model.params.values())).dtype
    dice_values: dict[int, list[float]] = {c: [] for c in range(NUM_CLASSES)}
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    score_chunks: dict[int, list[np.ndarray]] = {c: [] for c in range(NUM_CLASSES)}
    truth_chunks: dict[int, list[np.ndarray]] = {c: [] for c in range(NUM_CLASSES)}
    elapsed = 0.0
    for row in rows:
        sample = resize_sample(load_sample(row, base_dir), size)
        x = sample.image[None, None].astype(dtype)
        start = clock()
        probs = model.forward(x, train=False)
        elapsed += clock() - start
        pred = probs[0].argmax(axis=0)
        true = sample.mask.astype(np.int64)
        confusion += confusion_matrix(pred, true)
        for c in range(NUM_CLASSES):
            value = dice_per_class(pred, true, c)
            if value is not None:
                dice_values[c].append(value)
            score_chunks[c].append(probs[0, c].ravel())
            truth_chunks[c].append((true == c).ravel())
    roc: dict[int, RocCurve] = {}
    for c in range(NUM_CLASSES):
        scores = np.concatenate(score_chunks[c])
        truth = np.concatenate(truth_chunks[c])
        if truth.any() and not truth.all():
            roc[c] = roc_curve(scores, truth, c, max_samples=max_roc_samples, seed=seed)
    return EvalReport(
        dice_values=dice_values,
        confusion=confusion,
        roc=roc,
        accuracy=pixel_accuracy(confusion),
        ms_per_slice=1000.0 * elapsed / len(rows),
        fingerprint=dataset_fingerprint(rows, base_dir),
    )


def mean_foreground_dice(dice_values: dict[int, list[float]]) -> float:
    """Pooled mean of all foreground (class > 0) per-slice Dice values."""
    pooled = [v for c in range(1, NUM_CLASSES) for v in dice_values.get(c, [])]
    return float(np.mean(pooled)) if pooled else float("nan")


def write_report(report: EvalReport, out_dir) -> None:
    """Dump report.json plus per-class ROC CSVs and a 2-decimal confusion CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for c, curve in report.roc.items():
        with open(os.path.join(out_dir, f"roc_class{c}.csv"), "w", encoding="utf-8") as fh:
            fh.write("fpr,tpr\n")
            for f, t in zip(curve.fpr, curve.tpr):
                fh.write(f"{f!r},{t!r}\n")
    percent = row_normalized(report.confusion)
    with open(os.path.join(out_dir, "confusion.csv"), "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(f"pred_{c}" for c in range(NUM_CLASSES)) + "\n")
        for c in range(NUM_CLASSES):
            cells = ",".join(f"{v:.2f}" for v in percent[c])
            fh.write(f"true_{c},{cells}\n")
