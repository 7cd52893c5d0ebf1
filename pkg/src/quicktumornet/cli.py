"""The ``qtn`` command line: train, eval, predict, and synth subcommands.

Exit statuses: 0 success, 1 usage error, 2 data or format error (bad
manifests, slice files, checkpoints, missing inputs, incompatible
geometry), 3 runtime failure (training divergence, other I/O errors).

Flags mirror config field names; the same keys can come from a
``--config`` file of ``key=value`` lines (``#`` comments allowed), with
explicit flags taking precedence. Input files are never modified. Omitting
``--seed`` picks a random seed and logs it so the run can be reproduced.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .checkpoint import CheckpointError
from .data import (
    DataFormatError,
    SynthConfig,
    load_manifest,
    normalize_image,
    read_qtns,
    resize_image,
    resize_mask,
    save_manifest,
    split_by_patient,
    synth_generate,
    write_qtns,
)
from .loss import LossConfig
from .metrics import evaluate, mean_foreground_dice, write_report
from .model import ModelConfig, QuickTumorNet
from .trainer import DivergenceError, TrainConfig, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

OVERLAY_COLORS = {1: (0, 255, 0), 2: (0, 0, 255), 3: (255, 0, 0)}


class UsageError(Exception):
    """Bad flag combination or value; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"sizes are HxW, for example 256x256; got {text!r}") from None


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"ratios are three comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"ratios must be numeric, got {text!r}") from None


def _read_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise UsageError(f"config file {path} does not exist")
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            values[key.strip()] = value.strip().strip('"')
    return values


def _merged(args, file_values: dict[str, str], key: str, cast, default):
    """CLI flag beats config file beats built-in default."""
    from_cli = getattr(args, key)
    if from_cli is not None:
        return from_cli
    if key in file_values:
        try:
            return cast(file_values[key])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
    return default


def _optional_float(text: str):
    return None if text.lower() in ("none", "off") else float(text)


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = int.from_bytes(os.urandom(4), "little")
        print(f"seed: {seed} (chosen randomly; pass --seed {seed} to reproduce)")
    return seed


def cmd_train(args) -> int:
    file_values = _read_config_file(args.config) if args.config else {}
    seed = _resolve_seed(args.seed)
    model_cfg = ModelConfig(
        base_channels=_merged(args, file_values, "base_channels", int, 64),
        input_size=_parse_size(_merged(args, file_values, "input_size", str, "256x256")),
    )
    train_cfg = TrainConfig(
        learning_rate=_merged(args, file_values, "learning_rate", float, 1e-4),
        max_epochs=_merged(args, file_values, "max_epochs", int, 200),
        batch_size=_merged(args, file_values, "batch_size", int, 8),
        shuffle_seed=_merged(args, file_values, "shuffle_seed", int, seed),
        precision=_merged(args, file_values, "precision", str, "f64"),
        grad_clip=_merged(args, file_values, "grad_clip", _optional_float, None),
    )
    loss_cfg = LossConfig(
        l2_denominator=_merged(args, file_values, "l2_denominator", str, "class_support")
    )
    _, records = fit(
        model_cfg,
        train_cfg,
        args.manifest,
        args.out,
        seed,
        loss_cfg=loss_cfg,
        resume=args.resume,
        log=print,
    )
    if records:
        last = records[-1]
        print(
            f"finished at epoch {last.epoch}: train_loss={last.train_loss:.5f} "
            f"val_dice={last.val_dice:.4f}"
        )
    print(f"checkpoints and curve.csv written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = QuickTumorNet.load(args.weights)
    seed = _resolve_seed(args.seed)
    rows = load_manifest(args.manifest)
    selected = [r for r in rows if r.split == args.split]
    if not selected:
        raise DataFormatError(f"{args.manifest}: no rows in split {args.split!r}")
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    report = evaluate(model, selected, base_dir, seed=seed)
    write_report(report, args.out)
    dice = mean_foreground_dice(report.dice_values)
    print(f"{len(selected)} slices ({args.split} split)")
    print(f"pixel accuracy:       {report.accuracy:.4f}")
    print(f"mean foreground Dice: {dice:.4f}")
    print(f"per-slice time:       {report.ms_per_slice:.2f} ms")
    print(f"report written to {args.out}")
    return EXIT_OK


def _collect_inputs(path: str) -> list[str]:
    if os.path.isdir(path):
        names = sorted(
            n
            for n in os.listdir(path)
            if n.endswith(".qtns") and not n.endswith("_mask.qtns")
        )
        if not names:
            raise DataFormatError(f"{path}: no image slices (*.qtns) found")
        return [os.path.join(path, n) for n in names]
    if not os.path.exists(path):
        raise FileNotFoundError(f"input {path} does not exist")
    return [path]


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    return (
        (center != padded[:-2, 1:-1])
        | (center != padded[2:, 1:-1])
        | (center != padded[1:-1, :-2])
        | (center != padded[1:-1, 2:])
    )


def _write_overlay(path: str, image: np.ndarray, mask: np.ndarray) -> None:
    """Binary PPM of the slice with class boundaries traced in color."""
    gray = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    edges = _boundary_pixels(mask)
    for class_id, color in OVERLAY_COLORS.items():
        rgb[(mask == class_id) & edges] = color
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def cmd_predict(args) -> int:
    model = QuickTumorNet.load(args.weights)
    divisor = 2**model.config.depth
    dtype = next(iter(model.params.values())).dtype
    inputs = _collect_inputs(args.input)
    os.makedirs(args.out, exist_ok=True)
    times = []
    for path in inputs:
        array, kind = read_qtns(path)
        if kind != "image":
            raise DataFormatError(f"{path}: expected an image slice, found a mask")
        image = normalize_image(array.astype(np.float64))
        if args.resize:
            net_input = resize_image(image, model.config.input_size)
        else:
            h, w = image.shape
            if h % divisor or w % divisor:
                raise DataFormatError(
                    f"{path}: {h}x{w} is not divisible by {divisor}; pass --resize"
                )
            net_input = image
        x = net_input[None, None].astype(dtype)
        started = time.perf_counter()
        probs = model.forward(x, train=False)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        times.append(elapsed_ms)
        mask = probs.argmax(axis=1)[0].astype(np.uint8)
        if mask.shape != image.shape:
            mask = resize_mask(mask, image.shape)
        stem = os.path.splitext(os.path.basename(path))[0]
        write_qtns(os.path.join(args.out, f"{stem}_pred.qtns"), mask, "mask")
        if args.overlay:
            _write_overlay(
                os.path.join(args.out, f"{stem}_overlay.ppm"), image, mask
            )
        print(f"{os.path.basename(path)}: {elapsed_ms:.2f} ms")
    print(f"{len(inputs)} slices, mean {sum(times) / len(times):.2f} ms per slice")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    seed = _resolve_seed(args.seed)
    ratios = _parse_ratios(args.ratios)
    cfg = SynthConfig(count=args.n, size=_parse_size(args.size), seed=seed)
    rows = synth_generate(cfg, args.out)
    rows = split_by_patient(rows, ratios, seed)
    save_manifest(os.path.join(args.out, "manifest.csv"), rows)
    counts = {s: sum(1 for r in rows if r.split == s) for s in ("train", "val", "test")}
    print(
        f"wrote {len(rows)} slice pairs to {args.out} "
        f"(train {counts['train']}, val {counts['val']}, test {counts['test']})"
    )
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="qtn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a manifest")
    train.add_argument("--manifest", required=True, help="dataset manifest CSV")
    train.add_argument("--out", required=True, help="run directory for curve + checkpoints")
    train.add_argument("--epochs", dest="max_epochs", type=int, help="epochs to run (default 200)")
    train.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate (default 1e-4)")
    train.add_argument("--batch-size", dest="batch_size", type=int, help="slices per step (default 8)")
    train.add_argument(
        "--shuffle-seed", dest="shuffle_seed", type=int,
        help="epoch shuffle seed (defaults to --seed)",
    )
    train.add_argument("--precision", choices=("f32", "f64"), help="parameter dtype (default f64)")
    train.add_argument(
        "--grad-clip", dest="grad_clip", type=float,
        help="global gradient-norm ceiling (default off)",
    )
    train.add_argument(
        "--base-channels", dest="base_channels", type=int,
        help="width of the first encoder (default 64)",
    )
    train.add_argument("--input-size", dest="input_size", help="network resolution HxW (default 256x256)")
    train.add_argument(
        "--l2-denominator",
        dest="l2_denominator",
        choices=("class_support", "flagged_set"),
        help="normalizer for the weighted penalty terms (default class_support)",
    )
    train.add_argument("--resume", action="store_true", help="continue from <out>/last.qtnw")
    train.add_argument("--seed", type=int, help="master seed; drawn randomly and logged if omitted")
    train.add_argument("--config", help="key=value file supplying defaults for any flag above")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    ev.add_argument("--weights", required=True, help="QTNW checkpoint to load")
    ev.add_argument("--manifest", required=True, help="dataset manifest CSV")
    ev.add_argument(
        "--split", default="test", choices=("train", "val", "test"),
        help="which manifest split to score (default test)",
    )
    ev.add_argument("--out", required=True, help="directory for report.json and CSVs")
    ev.add_argument("--seed", type=int, help="ROC subsampling seed; random and logged if omitted")
    ev.set_defaults(func=cmd_eval)

    pred = sub.add_parser("predict", help="write predicted masks for slices")
    pred.add_argument("--weights", required=True, help="QTNW checkpoint to load")
    pred.add_argument("--input", required=True, help="QTNS image file or directory")
    pred.add_argument("--out", required=True, help="directory for *_pred.qtns masks")
    pred.add_argument("--overlay", action="store_true", help="also write PPM boundary overlays")
    pred.add_argument(
        "--resize", action="store_true",
        help="resize inputs to the network resolution and predictions back",
    )
    pred.set_defaults(func=cmd_predict)

    synth = sub.add_parser("synth", help="generate a synthetic slice dataset")
    synth.add_argument("--out", required=True, help="destination dataset directory")
    synth.add_argument("--n", required=True, type=int, help="number of slices (one patient each)")
    synth.add_argument("--seed", type=int, help="generator seed; random and logged if omitted")
    synth.add_argument("--size", default="64x64", help="slice size HxW (default 64x64)")
    synth.add_argument(
        "--ratios", default="0.8,0.1,0.1",
        help="train,val,test patient-split fractions (default 0.8,0.1,0.1)",
    )
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help paths
        code = exc.code or 0
        return EXIT_USAGE if code == 2 else int(code)
    except (DataFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
