"""Slice storage, manifests, patient-wise splits, resizing, synthetic data.

On-disk formats (all integers little-endian):

QTNS slice file
    magic "QTNS" | u32 version (=1) | u8 kind (1=image, 2=mask)
    | u8 dtype (1=f32, 2=u8) | u32 height | u32 width
    | raw little-endian row-major data | u32 CRC-32 of all preceding bytes

Manifest CSV
    header ``image,mask,patient_id,plane,classes,split``; file paths are
    relative to the manifest's directory (absolute paths pass through);
    ``classes`` lists the tumor classes present, ';'-joined, background
    omitted; ``split`` is one of train/val/test.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1
NUM_CLASSES = 4
CLASS_NAMES = ("normal", "meningioma", "glioma", "pituitary")
PLANES = ("axial", "sagittal", "coronal")
MANIFEST_HEADER = ["image", "mask", "patient_id", "plane", "classes", "split"]
SPLITS = ("train", "val", "test")
MAX_DIM = 4096

_KIND_CODES = {"image": 1, "mask": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class DataFormatError(Exception):
    """Base class for slice-file and manifest problems."""


class SliceFormatError(DataFormatError):
    """Bad magic, version, kind, or dtype code in a QTNS file."""


class SliceTruncationError(DataFormatError):
    """A QTNS file holds fewer bytes than its header declares."""


class SliceChecksumError(DataFormatError):
    """The QTNS trailing CRC-32 does not match."""


class InvalidClassError(DataFormatError):
    """A mask contains a value outside the known class codes."""


class ManifestError(DataFormatError):
    """A manifest is missing, malformed, or leaks patients across splits."""


def write_qtns(path, array: np.ndarray, kind: str) -> None:
    """Write a 2-D image (float32) or mask (uint8) slice."""
    if kind not in _KIND_CODES:
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    if array.ndim != 2:
        raise ValueError(f"slice arrays are 2-D, got shape {array.shape}")
    h, w = array.shape
    if h > MAX_DIM or w > MAX_DIM:
        raise ValueError(f"slice dims {h}x{w} exceed the {MAX_DIM} limit")
    if kind == "image":
        data = np.ascontiguousarray(array, dtype="<f4")
        dtype_code = 1
    else:
        if array.size and (array.min() < 0 or array.max() >= NUM_CLASSES):
            raise InvalidClassError(
                f"mask values must lie in [0, {NUM_CLASSES}), got max {array.max()}"
            )
        data = np.ascontiguousarray(array, dtype=np.uint8)
        dtype_code = 2
    body = (
        QTNS_MAGIC
        + struct.pack("<IBBII", QTNS_VERSION, _KIND_CODES[kind], dtype_code, h, w)
        + data.tobytes()
    )
    payload = body + struct.pack("<I", zlib.crc32(body))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_qtns(path) -> tuple[np.ndarray, str]:
    """Read a QTNS file back into (array, kind)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_len = 4 + 4 + 1 + 1 + 4 + 4
    if len(blob) < 4 or blob[:4] != QTNS_MAGIC:
        raise SliceFormatError(f"{path}: missing {QTNS_MAGIC!r} magic")
    if len(blob) < header_len + 4:
        raise SliceTruncationError(f"{path}: too short to hold a slice header")
    version, kind_code, dtype_code, h, w = struct.unpack("<IBBII", blob[4:header_len])
    if version != QTNS_VERSION:
        raise SliceFormatError(f"{path}: version {version}, reader supports {QTNS_VERSION}")
    if kind_code not in _KIND_NAMES:
        raise SliceFormatError(f"{path}: unknown kind code {kind_code}")
    if dtype_code not in (1, 2):
        raise SliceFormatError(f"{path}: unknown dtype code {dtype_code}")
    if h > MAX_DIM or w > MAX_DIM:
        raise SliceFormatError(f"{path}: dims {h}x{w} exceed the {MAX_DIM} limit")
    itemsize = 4 if dtype_code == 1 else 1
    expected = header_len + h * w * itemsize + 4
    if len(blob) < expected:
        raise SliceTruncationError(
            f"{path}: declares {h}x{w} ({expected} bytes) but holds {len(blob)}"
        )
    if len(blob) > expected:
        raise SliceFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    (stored,) = struct.unpack("<I", blob[-4:])
    if stored != zlib.crc32(blob[:-4]):
        raise SliceChecksumError(f"{path}: CRC-32 mismatch")
    raw = blob[header_len:-4]
    if dtype_code == 1:
        array = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
    else:
        array = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    kind = _KIND_NAMES[kind_code]
    if kind == "mask":
        if dtype_code != 2:
            raise SliceFormatError(f"{path}: masks must use the u8 dtype code")
        if array.size and array.max() >= NUM_CLASSES:
            raise InvalidClassError(
                f"{path}: mask value {array.max()} outside [0, {NUM_CLASSES})"
            )
    return array, kind


@dataclass
class SliceSample:
    image: np.ndarray
    mask: np.ndarray | None
    patient_id: str
    plane: str


@dataclass
class ManifestRow:
    image: str
    mask: str
    patient_id: str
    plane: str
    classes: tuple[int, ...]
    split: str


def _parse_classes(text: str, where: str) -> tuple[int, ...]:
    if not text:
        return ()
    out = []
    for piece in text.split(";"):
        try:
            value = int(piece)
        except ValueError:
            raise ManifestError(f"{where}: bad classes entry {piece!r}") from None
        if not 1 <= value < NUM_CLASSES:
            raise ManifestError(f"{where}: class id {value} outside 1..{NUM_CLASSES - 1}")
        out.append(value)
    return tuple(out)


def load_manifest(path) -> list[ManifestRow]:
    """Read and validate a manifest; referenced files must exist."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest {path} does not exist")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: header {header} does not match {MANIFEST_HEADER}"
            )
        rows = []
        patient_splits: dict[str, str] = {}
        for lineno, record in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if len(record) != len(MANIFEST_HEADER):
                raise ManifestError(f"{where}: expected {len(MANIFEST_HEADER)} fields")
            image, mask, patient_id, plane, classes, split = record
            if plane not in PLANES and plane != "":
                raise ManifestError(f"{where}: unknown plane {plane!r}")
            if split not in SPLITS:
                raise ManifestError(f"{where}: unknown split {split!r}")
            for ref in (image, mask):
                resolved = ref if os.path.isabs(ref) else os.path.join(base, ref)
                if not os.path.exists(resolved):
                    raise ManifestError(f"{where}: referenced file {ref} is missing")
            seen = patient_splits.setdefault(patient_id, split)
            if seen != split:
                raise ManifestError(
                    f"{where}: patient {patient_id} appears in both "
                    f"{seen!r} and {split!r} splits"
                )
            rows.append(
                ManifestRow(image, mask, patient_id, plane, _parse_classes(classes, where), split)
            )
    if not rows:
        raise ManifestError(f"{path}: manifest has no data rows")
    return rows


def save_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.image,
                    row.mask,
                    row.patient_id,
                    row.plane,
                    ";".join(str(c) for c in row.classes),
                    row.split,
                ]
            )


def split_by_patient(
    rows: list[ManifestRow], ratios: tuple[float, float, float], seed: int
) -> list[ManifestRow]:
    """Reassign split tags patient-wise: floor for train and val, rest to test.

    Patients are shuffled with the seeded generator, so the same seed always
    yields the same assignment. Every slice of a patient lands in one split.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three nonnegative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    patients = sorted({row.patient_id for row in rows})
    buckets = sum(1 for r in ratios if r > 0)
    if len(patients) < buckets:
        raise ValueError(
            f"{len(patients)} patients cannot fill {buckets} nonzero split buckets"
        )
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n_train = int(math.floor(ratios[0] * len(patients) + 1e-9))
    n_val = int(math.floor(ratios[1] * len(patients) + 1e-9))
    assignment = {}
    for pos, patient in enumerate(shuffled):
        if pos < n_train:
            assignment[patient] = "train"
        elif pos < n_train + n_val:
            assignment[patient] = "val"
        else:
            assignment[patient] = "test"
    return [
        ManifestRow(r.image, r.mask, r.patient_id, r.plane, r.classes, assignment[r.patient_id])
        for r in rows
    ]


def _resize_axes(src: int, dst: int):
    scale = src / dst
    x = (np.arange(dst) + 0.5) * scale - 0.5
    x0f = np.floor(x)
    frac = x - x0f
    lo = np.clip(x0f.astype(int), 0, src - 1)
    hi = np.clip(x0f.astype(int) + 1, 0, src - 1)
    return lo, hi, frac


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    th, tw = size
    if image.shape == (th, tw):
        return image.copy()
    ylo, yhi, fy = _resize_axes(image.shape[0], th)
    xlo, xhi, fx = _resize_axes(image.shape[1], tw)
    fy = fy[:, None].astype(image.dtype)
    fx = fx[None, :].astype(image.dtype)
    top = image[ylo][:, xlo] * (1 - fx) + image[ylo][:, xhi] * fx
    bottom = image[yhi][:, xlo] * (1 - fx) + image[yhi][:, xhi] * fx
    return top * (1 - fy) + bottom * fy


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize; class ids are never blended."""
    th, tw = size
    if mask.shape == (th, tw):
        return mask.copy()
    ys = np.clip(np.round((np.arange(th) + 0.5) * mask.shape[0] / th - 0.5).astype(int),
                 0, mask.shape[0] - 1)
    xs = np.clip(np.round((np.arange(tw) + 0.5) * mask.shape[1] / tw - 0.5).astype(int),
                 0, mask.shape[1] - 1)
    return mask[ys][:, xs]


def resize_sample(sample: SliceSample, size: tuple[int, int]) -> SliceSample:
    th, tw = size
    if th % 16 or tw % 16:
        raise ValueError(f"target size {th}x{tw} must be divisible by 16")
    mask = None if sample.mask is None else resize_mask(sample.mask, size)
    return SliceSample(resize_image(sample.image, size), mask, sample.patient_id, sample.plane)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-slice min-max to [0, 1]; constant slices collapse to zero."""
    image = image.astype(image.dtype if image.dtype.kind == "f" else np.float32)
    lo = image.min()
    span = image.max() - lo
    if span == 0:
        return np.zeros_like(image)
    return (image - lo) / span


def load_sample(row: ManifestRow, base_dir: str) -> SliceSample:
    """Read one manifest row's slice pair, normalizing the image."""

    def resolve(ref):
        return ref if os.path.isabs(ref) else os.path.join(base_dir, ref)

    image, kind = read_qtns(resolve(row.image))
    if kind != "image":
        raise SliceFormatError(f"{row.image}: expected an image slice, found {kind}")
    mask, kind = read_qtns(resolve(row.mask))
    if kind != "mask":
        raise SliceFormatError(f"{row.mask}: expected a mask slice, found {kind}")
    if image.shape != mask.shape:
        raise DataFormatError(
            f"{row.image}: image {image.shape} and mask {mask.shape} dims differ"
        )
    return SliceSample(normalize_image(image), mask, row.patient_id, row.plane)


def load_arrays(
    rows: list[ManifestRow], base_dir: str, size: tuple[int, int], dtype=np.float64
) -> tuple[np.ndarray, np.ndarray]:
    """Stack manifest rows into network-ready (n,1,h,w) images + (n,h,w) labels."""
    images = np.empty((len(rows), 1) + tuple(size), dtype=dtype)
    labels = np.empty((len(rows),) + tuple(size), dtype=np.int64)
    for i, row in enumerate(rows):
        sample = resize_sample(load_sample(row, base_dir), size)
        images[i, 0] = sample.image
        labels[i] = sample.mask
    return images, labels


@dataclass
class SynthConfig:
    """Parameters of the synthetic slice generator.

    Lesion classes use separable textures: bright and smooth (1), mid-tone
    and heavily speckled (2), dark and smooth (3), against a mid-intensity
    noisy brain disc. Axis lengths are fractions of the shorter image side.
    """

    count: int
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    max_lesions: int = 2
    axis_range: tuple[float, float] = (0.08, 0.2)
    brain_intensity: float = 0.45
    brain_noise: float = 0.06
    floor_intensity: float = 0.05
    class_intensity: tuple[float, float, float] = (0.85, 0.55, 0.2)
    class_noise: tuple[float, float, float] = (0.03, 0.15, 0.03)

    def max_foreground_fraction(self) -> float:
        """Upper bound on lesion pixels per slice, from the generator's own
        geometry: lesion count times the area of the largest ellipse, with a
        one-pixel rasterization margin per semi-axis."""
        h, w = self.size
        a = self.axis_range[1] * min(h, w) + 1.0
        return min(1.0, self.max_lesions * math.pi * a * a / (h * w))


def _ellipse_mask(h, w, cy, cx, ay, ax):
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def synth_generate(cfg: SynthConfig, out_dir) -> list[ManifestRow]:
    """Write ``cfg.count`` slice pairs plus a manifest; returns the rows.

    Every slice gets its own synthetic patient id, so patient-wise splitting
    degenerates to slice-wise splitting on this data. All rows start in the
    train split; callers re-split as needed.
    """
    if cfg.count < 1:
        raise ValueError(f"count must be positive, got {cfg.count}")
    os.makedirs(out_dir, exist_ok=True)
    h, w = cfg.size
    rows = []
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        image = np.full((h, w), cfg.floor_intensity, dtype=np.float64)
        image += 0.02 * rng.standard_normal((h, w))
        brain = _ellipse_mask(h, w, h / 2, w / 2, 0.44 * h, 0.46 * w)
        image[brain] = cfg.brain_intensity + cfg.brain_noise * rng.standard_normal(
            int(brain.sum())
        )
        mask = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(0, cfg.max_lesions + 1))):
            cls = int(rng.integers(1, NUM_CLASSES))
            ay = rng.uniform(*cfg.axis_range) * min(h, w)
            ax = rng.uniform(*cfg.axis_range) * min(h, w)
            cy = rng.uniform(0.25 * h, 0.75 * h)
            cx = rng.uniform(0.25 * w, 0.75 * w)
            lesion = _ellipse_mask(h, w, cy, cx, ay, ax)
            texture = cfg.class_intensity[cls - 1] + cfg.class_noise[
                cls - 1
            ] * rng.standard_normal(int(lesion.sum()))
            image[lesion] = texture
            mask[lesion] = cls
        image = np.clip(image, 0.0, 1.0)
        image_name = f"slice{i:04d}.qtns"
        mask_name = f"slice{i:04d}_mask.qtns"
        write_qtns(os.path.join(out_dir, image_name), image.astype(np.float32), "image")
        write_qtns(os.path.join(out_dir, mask_name), mask, "mask")
        rows.append(
            ManifestRow(
                image=image_name,
                mask=mask_name,
                patient_id=f"synth{i:04d}",
                plane=PLANES[i % 3],
                classes=tuple(int(c) for c in np.unique(mask) if c),
                split="train",
            )
        )
    save_manifest(os.path.join(out_dir, "manifest.csv"), rows)
    return rows
