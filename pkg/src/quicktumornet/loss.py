"""Adaptive class-balanced cross entropy for 4-class slice segmentation.

The loss treats each class one-vs-rest on the softmax output and sums two
parts per class:

* a class-balanced cross entropy: the mean negative log probability over
  the class's own pixels plus the mean over everybody else's pixels;
* a mistake-focused part: extra penalty on false-positive pixels (class
  probability above threshold despite a different label) and false-negative
  pixels (at or below threshold despite carrying the label), scaled by
  adaptive weights gamma1/gamma2 in [0.5, 1.0] that grow with how far the
  offending probabilities sit from the 0.5 decision point.

Set membership and the gamma weights are recomputed from the current
probabilities each call and treated as constants during differentiation.
Probabilities are clamped below by ``log_floor`` before every log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossConfig:
    threshold: float = 0.5
    log_floor: float = 1e-12
    # mistake terms divide by the full class-support counts |Y+| / |Y-|;
    # "flagged_set" switches to the false-positive/negative counts instead
    l2_denominator: str = "class_support"

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.l2_denominator not in ("class_support", "flagged_set"):
            raise ValueError(f"unknown l2_denominator {self.l2_denominator!r}")


@dataclass
class ClassPartition:
    """Per-class boolean pixel masks, each of shape (num_classes, n, h, w)."""

    y_plus: np.ndarray
    y_minus: np.ndarray
    f_plus: np.ndarray
    f_minus: np.ndarray

    @property
    def n_plus(self) -> np.ndarray:
        return self.y_plus.sum(axis=(1, 2, 3))

    @property
    def n_minus(self) -> np.ndarray:
        return self.y_minus.sum(axis=(1, 2, 3))

    @property
    def n_fplus(self) -> np.ndarray:
        return self.f_plus.sum(axis=(1, 2, 3))

    @property
    def n_fminus(self) -> np.ndarray:
        return self.f_minus.sum(axis=(1, 2, 3))


@dataclass
class LossTerms:
    """Per-class components and their aggregate; gammas are NaN when undefined."""

    l1_per_class: np.ndarray
    l2_per_class: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    n_plus: np.ndarray
    n_minus: np.ndarray
    n_fplus: np.ndarray
    n_fminus: np.ndarray
    degenerate: np.ndarray

    @property
    def l1(self) -> float:
        return float(self.l1_per_class.sum())

    @property
    def l2(self) -> float:
        return float(self.l2_per_class.sum())

    @property
    def total(self) -> float:
        return float((self.l1_per_class + self.l2_per_class).sum())


def _check_shapes(probs: np.ndarray, labels: np.ndarray) -> int:
    if probs.ndim != 4:
        raise ValueError(f"probabilities must be (n, classes, h, w), got {probs.shape}")
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got [{labels.min()}, {labels.max()}]")
    return c


def partition_sets(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> ClassPartition:
    """Split pixels per class into own/others and the mispredicted subsets."""
    cfg.validate()
    num_classes = _check_shapes(probs, labels)
    classes = np.arange(num_classes)
    y_plus = labels[None, :, :, :] == classes[:, None, None, None]
    y_minus = ~y_plus
    scores = np.moveaxis(probs, 1, 0)  # (classes, n, h, w)
    above = scores > cfg.threshold
    return ClassPartition(
        y_plus=y_plus,
        y_minus=y_minus,
        f_plus=y_minus & above,
        f_minus=y_plus & ~above,
    )


def compute_gammas(
    partition: ClassPartition, probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive weights from the mean |p - 0.5| of the mispredicted pixels.

    The false-positive weight looks at the complement probability 1 - P_c
    (how confidently the pixel was called class c despite not being it); the
    false-negative weight looks at P_c itself. Empty sets yield NaN.
    """
    scores = np.moveaxis(probs, 1, 0)
    num_classes = scores.shape[0]
    gamma1 = np.full(num_classes, np.nan)
    gamma2 = np.full(num_classes, np.nan)
    for c in range(num_classes):
        fp = partition.f_plus[c]
        fn = partition.f_minus[c]
        if fp.any():
            gamma1[c] = 0.5 + np.abs((1.0 - scores[c][fp]) - 0.5).mean()
        if fn.any():
            gamma2[c] = 0.5 + np.abs(scores[c][fn] - 0.5).mean()
    return gamma1, gamma2


def loss_forward(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    partition: ClassPartition | None = None,
    gammas: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossTerms:
    """Evaluate the loss; pass ``partition``/``gammas`` to reuse frozen sets."""
    cfg.validate()
    num_classes = _check_shapes(probs, labels)
    if partition is None:
        partition = partition_sets(probs, labels, cfg)
    if gammas is None:
        gammas = compute_gammas(partition, probs)
    gamma1, gamma2 = gammas

    scores = np.moveaxis(probs, 1, 0)
    floor = cfg.log_floor
    log_p = np.log(np.maximum(scores, floor))
    log_q = np.log(np.maximum(1.0 - scores, floor))

    n_plus = partition.n_plus
    n_minus = partition.n_minus
    n_fplus = partition.n_fplus
    n_fminus = partition.n_fminus

    l1 = np.zeros(num_classes)
    l2 = np.zeros(num_classes)
    degenerate = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        if n_plus[c]:
            l1[c] -= log_p[c][partition.y_plus[c]].sum() / n_plus[c]
        else:
            degenerate[c] = True
        if n_minus[c]:
            l1[c] -= log_q[c][partition.y_minus[c]].sum() / n_minus[c]
        else:
            degenerate[c] = True

        den1 = n_plus[c] if cfg.l2_denominator == "class_support" else n_fplus[c]
        den2 = n_minus[c] if cfg.l2_denominator == "class_support" else n_fminus[c]
        if n_fplus[c]:
            if den1:
                l2[c] -= gamma1[c] * log_q[c][partition.f_plus[c]].sum() / den1
            else:
                degenerate[c] = True
        if n_fminus[c]:
            if den2:
                l2[c] -= gamma2[c] * log_p[c][partition.f_minus[c]].sum() / den2
            else:
                degenerate[c] = True

    return LossTerms(
        l1_per_class=l1,
        l2_per_class=l2,
        gamma1=gamma1,
        gamma2=gamma2,
        n_plus=n_plus,
        n_minus=n_minus,
        n_fplus=n_fplus,
        n_fminus=n_fminus,
        degenerate=degenerate,
    )


def loss_backward(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    partition: ClassPartition | None = None,
    gammas: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Exact gradient of the total loss w.r.t. the probabilities.

    Sets and gammas are frozen (recomputed here only if not supplied), and
    the clamp applied before each log means pixels at or below the floor
    contribute zero slope.
    """
    cfg.validate()
    num_classes = _check_shapes(probs, labels)
    if partition is None:
        partition = partition_sets(probs, labels, cfg)
    if gammas is None:
        gammas = compute_gammas(partition, probs)
    gamma1, gamma2 = gammas

    scores = np.moveaxis(probs, 1, 0)
    floor = cfg.log_floor
    # d/dp log(max(p, floor)) and d/dp log(max(1-p, floor))
    slope_p = np.where(scores > floor, 1.0 / np.maximum(scores, floor), 0.0)
    slope_q = np.where(1.0 - scores > floor, -1.0 / np.maximum(1.0 - scores, floor), 0.0)

    n_plus = partition.n_plus
    n_minus = partition.n_minus
    n_fplus = partition.n_fplus
    n_fminus = partition.n_fminus

    grad = np.zeros_like(probs)
    for c in range(num_classes):
        g = np.zeros_like(scores[c])
        if n_plus[c]:
            mask = partition.y_plus[c]
            g[mask] -= slope_p[c][mask] / n_plus[c]
        if n_minus[c]:
            mask = partition.y_minus[c]
            g[mask] -= slope_q[c][mask] / n_minus[c]
        den1 = n_plus[c] if cfg.l2_denominator == "class_support" else n_fplus[c]
        den2 = n_minus[c] if cfg.l2_denominator == "class_support" else n_fminus[c]
        if n_fplus[c] and den1:
            mask = partition.f_plus[c]
            g[mask] -= gamma1[c] * slope_q[c][mask] / den1
        if n_fminus[c] and den2:
            mask = partition.f_minus[c]
            g[mask] -= gamma2[c] * slope_p[c][mask] / den2
        grad[:, c] = g

    if not np.isfinite(grad).all():
        raise FloatingPointError("loss gradient contains non-finite entries")
    return grad
