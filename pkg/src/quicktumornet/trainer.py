"""Adam optimization and the deterministic training loop.

``fit`` trains from a manifest, appends one learning-curve row per epoch to
``curve.csv`` (header ``epoch,train_loss,train_acc,val_acc,val_dice,seconds``),
keeps ``last.qtnw`` after every epoch alongside the optimizer state, and
copies it to ``best.qtnw`` whenever the validation foreground Dice improves.
With an empty validation split the validation columns are NaN and
``best.qtnw`` simply mirrors ``last.qtnw``.

All shuffling derives from (shuffle_seed, epoch), so a resumed run replays
the exact batch order the uninterrupted run would have used, and two runs
with identical seeds, data, and precision produce bitwise-identical
artifacts (the wall-clock column is injectable for that purpose).
"""

from __future__ import annotations

import math
import os
import shutil
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_arrays, load_manifest
from .loss import LossConfig, compute_gammas, loss_backward, loss_forward, partition_sets
from .metrics import dice_per_class, mean_foreground_dice
from .model import ModelConfig, QuickTumorNet

CURVE_HEADER = "epoch,train_loss,train_acc,val_acc,val_dice,seconds"


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 200
    batch_size: int = 8
    shuffle_seed: int = 0
    precision: str = "f64"
    checkpoint_dir: str | None = None
    grad_clip: float | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    val_dice: float
    seconds: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.train_loss!r},{self.train_acc!r},"
            f"{self.val_acc!r},{self.val_dice!r},{self.seconds!r}"
        )


class AdamState:
    """First/second moment estimates per trainable tensor plus a step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], names: list[str]) -> "AdamState":
        state = cls()
        for name in names:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        return state


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update applied in place; refuses non-finite grads."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _clip_gradients(grads: dict[str, np.ndarray], limit: float) -> None:
    norm = math.sqrt(sum(float(np.square(g).sum()) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        for g in grads.values():
            g *= scale


def train_epoch(
    model: QuickTumorNet,
    state: AdamState,
    images: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[float, float]:
    """One pass over the training arrays; returns (mean loss, pixel accuracy)."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = np.random.default_rng([cfg.shuffle_seed, epoch]).permutation(n)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        xb = images[batch]
        yb = labels[batch]
        probs = model.forward(xb, train=True)
        if not np.isfinite(probs).all():
            raise DivergenceError(f"non-finite network output in epoch {epoch}")
        partition = partition_sets(probs, yb, loss_cfg)
        gammas = compute_gammas(partition, probs)
        terms = loss_forward(probs, yb, loss_cfg, partition, gammas)
        if not math.isfinite(terms.total):
            raise DivergenceError(f"non-finite training loss in epoch {epoch}")
        grads = model.backward(loss_backward(probs, yb, loss_cfg, partition, gammas))
        if cfg.grad_clip is not None:
            _clip_gradients(grads, cfg.grad_clip)
        adam_step(model.params, grads, state, cfg.learning_rate)
        loss_sum += terms.total * len(batch)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / labels.size


def _validate(
    model: QuickTumorNet,
    images: np.ndarray | None,
    labels: np.ndarray | None,
    batch_size: int,
) -> tuple[float, float]:
    if images is None or len(images) == 0:
        return float("nan"), float("nan")
    correct = 0
    dice_values: dict[int, list[float]] = {c: [] for c in range(1, model.config.num_classes)}
    for start in range(0, len(images), batch_size):
        probs = model.forward(images[start : start + batch_size], train=False)
        preds = probs.argmax(axis=1)
        truth = labels[start : start + batch_size]
        correct += int((preds == truth).sum())
        for i in range(len(preds)):
            for c in range(1, model.config.num_classes):
                value = dice_per_class(preds[i], truth[i], c)
                if value is not None:
                    dice_values[c].append(value)
    return correct / labels.size, mean_foreground_dice(dice_values)


def _optim_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name in state.m:
        out[f"optim.{name}.m"] = state.m[name]
        out[f"optim.{name}.v"] = state.v[name]
    return out


def fit(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    manifest_path,
    out_dir,
    seed: int,
    loss_cfg: LossConfig | None = None,
    resume: bool = False,
    clock=time.perf_counter,
    log=None,
) -> tuple[QuickTumorNet, list[EpochRecord]]:
    """Train from a manifest's train split, logging and checkpointing per epoch."""
    train_cfg.validate()
    loss_cfg = loss_cfg or LossConfig()
    rows = load_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    train_rows = [r for r in rows if r.split == "train"]
    val_rows = [r for r in rows if r.split == "val"]
    if not train_rows:
        raise ValueError(f"{manifest_path}: no rows in the train split")

    os.makedirs(out_dir, exist_ok=True)
    curve_path = os.path.join(out_dir, "curve.csv")
    last_path = os.path.join(out_dir, "last.qtnw")
    best_path = os.path.join(out_dir, "best.qtnw")

    if resume and os.path.exists(last_path):
        header, tensors = load_checkpoint(last_path)
        model_cfg = ModelConfig.from_dict(header["model"])
        model = QuickTumorNet(
            model_cfg, {k: v for k, v in tensors.items() if not k.startswith("optim.")}
        )
        state = AdamState()
        for name in model.trainable_names():
            try:
                state.m[name] = tensors[f"optim.{name}.m"]
                state.v[name] = tensors[f"optim.{name}.v"]
            except KeyError:
                raise ValueError(
                    f"{last_path} lacks optimizer state for {name}; cannot resume"
                ) from None
        state.t = int(header["extra"]["adam_t"])
        start_epoch = int(header["extra"]["epoch"])
        best_dice = float(header["extra"]["best_val_dice"])
        seed = int(header["seed"])
    else:
        model = QuickTumorNet.build(model_cfg, seed).astype(train_cfg.dtype)
        state = AdamState.fresh(model.params, model.trainable_names())
        start_epoch = 0
        best_dice = float("-inf")
        with open(curve_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CURVE_HEADER + "\n")

    images, labels = load_arrays(train_rows, base_dir, model_cfg.input_size, train_cfg.dtype)
    if val_rows:
        val_images, val_labels = load_arrays(
            val_rows, base_dir, model_cfg.input_size, train_cfg.dtype
        )
    else:
        val_images = val_labels = None

    records: list[EpochRecord] = []
    for epoch in range(start_epoch + 1, train_cfg.max_epochs + 1):
        started = clock()
        try:
            train_loss, train_acc = train_epoch(
                model, state, images, labels, loss_cfg, train_cfg, epoch
            )
        except DivergenceError as exc:
            if os.path.exists(last_path):
                raise DivergenceError(f"{exc}; last good checkpoint: {last_path}") from exc
            raise DivergenceError(f"{exc}; no checkpoint written yet") from exc
        val_acc, val_dice = _validate(model, val_images, val_labels, train_cfg.batch_size)
        record = EpochRecord(
            epoch, train_loss, train_acc, val_acc, val_dice, clock() - started
        )
        records.append(record)
        with open(curve_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(record.csv_row() + "\n")

        improved = not math.isnan(val_dice) and val_dice > best_dice
        if improved:
            best_dice = val_dice
        header = {
            "model": model.config.to_dict(),
            "seed": seed,
            "extra": {"epoch": epoch, "adam_t": state.t, "best_val_dice": best_dice},
        }
        save_checkpoint(last_path, header, {**model.params, **_optim_tensors(state)})
        if val_images is None or improved:
            shutil.copyfile(last_path, best_path)
        if log:
            log(
                f"epoch {epoch}: train_loss={train_loss:.5f} train_acc={train_acc:.4f} "
                f"val_acc={val_acc:.4f} val_dice={val_dice:.4f} ({record.seconds:.1f}s)"
            )
    return model, records
