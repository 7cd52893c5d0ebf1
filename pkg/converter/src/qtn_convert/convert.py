"""Archive conversion and output verification.

convert_archive walks a directory of per-slice MATLAB v7.3 containers in
sorted filename order, writes one normalized image slice and one class-id
mask slice per readable record, and assembles a manifest. Records that fail
to decode are skipped, with the reason logged to an errors file, so one bad
download does not abort a multi-thousand-file run.

verify_counts reads a converted manifest back and tallies slices, per-class
slice counts, and distinct patients. The full public release is expected to
tally 3064 slices (708 meningioma, 1426 glioma, 930 pituitary) from 233
patients; expected_full_rows pairs each observed quantity with those
targets for reporting.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .records import RecordError, read_record
from .slicefile import MANIFEST_HEADER, write_manifest, write_slice

EXPECTED_SLICES = 3064
EXPECTED_CLASS_COUNTS = {1: 708, 2: 1426, 3: 930}
EXPECTED_PATIENTS = 233
CLASS_NAMES = {1: "meningioma", 2: "glioma", 3: "pituitary"}

MANIFEST_NAME = "manifest.csv"
ERRORS_NAME = "errors.log"


class ConvertError(Exception):
    """Conversion or verification cannot proceed at all."""


@dataclass
class ConversionReport:
    """What one convert_archive run produced."""

    converted: int
    skipped: list = field(default_factory=list)
    manifest_path: str = ""
    errors_path: str | None = None


@dataclass
class DatasetSummary:
    """Tallies from a converted manifest."""

    slices: int
    class_counts: dict
    patients: int


def normalize_to_unit(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    arr = np.asarray(image, dtype=np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def convert_archive(src_dir, out_dir) -> ConversionReport:
    """Convert every .mat record under src_dir into slice pairs + manifest.

    Output files are named after the source stem ("17.mat" becomes
    "17.qtns" and "17_mask.qtns") and manifest rows follow the sorted
    source filename order, so a re-run writes byte-identical output. The
    mask holds the record's tumor-type code wherever the source mask is
    set and zero elsewhere; the manifest classes column lists the distinct
    nonzero codes actually present. Every row starts in the train split
    and carries a blank plane column; downstream tooling reassigns splits.
    """
    names = sorted(n for n in os.listdir(src_dir) if n.endswith(".mat"))
    if not names:
        raise ConvertError(f"no .mat records under {src_dir}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    skipped = []
    for name in names:
        try:
            record = read_record(os.path.join(src_dir, name))
        except RecordError as exc:
            skipped.append((name, str(exc)))
            continue
        stem = name[: -len(".mat")]
        image_name = f"{stem}.qtns"
        mask_name = f"{stem}_mask.qtns"
        mask = np.where(record.mask, np.uint8(record.label), np.uint8(0))
        write_slice(os.path.join(out_dir, image_name), normalize_to_unit(record.image), "image")
        write_slice(os.path.join(out_dir, mask_name), mask, "mask")
        classes = ";".join(str(c) for c in sorted(int(v) for v in np.unique(mask) if v))
        rows.append((image_name, mask_name, record.patient_id, "", classes, "train"))
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    write_manifest(manifest_path, rows)
    errors_path = os.path.join(out_dir, ERRORS_NAME)
    if skipped:
        with open(errors_path, "w", encoding="utf-8") as fh:
            for name, reason in skipped:
                fh.write(f"{name}: {reason}\n")
    else:
        if os.path.exists(errors_path):
            os.remove(errors_path)
        errors_path = None
    return ConversionReport(len(rows), skipped, manifest_path, errors_path)


def verify_counts(out_dir) -> DatasetSummary:
    """Tally a converted directory's manifest.

    Per-class counts come from the manifest classes column: a slice listing
    class c counts once toward c, so a slice is counted under every tumor
    class it contains (on the public release each slice holds exactly one).
    """
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise ConvertError(f"no manifest at {manifest_path}; convert first")
    class_counts = {code: 0 for code in CLASS_NAMES}
    patients = set()
    slices = 0
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(MANIFEST_HEADER):
            raise ConvertError(f"{manifest_path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ConvertError(
                    f"{manifest_path}:{lineno}: expected {len(MANIFEST_HEADER)} fields"
                )
            slices += 1
            patients.add(row[2])
            for piece in row[4].split(";"):
                if not piece:
                    continue
                try:
                    code = int(piece)
                except ValueError:
                    raise ConvertError(
                        f"{manifest_path}:{lineno}: bad class entry {piece!r}"
                    ) from None
                if code not in class_counts:
                    raise ConvertError(
                        f"{manifest_path}:{lineno}: class id {code} outside 1..{max(class_counts)}"
                    )
                class_counts[code] += 1
    return DatasetSummary(slices, class_counts, len(patients))


def expected_full_rows(summary: DatasetSummary):
    """Pair each observed tally with the full-release target value."""
    rows = [("slices", summary.slices, EXPECTED_SLICES)]
    for code, expected in EXPECTED_CLASS_COUNTS.items():
        rows.append(
            (
                f"class {code} ({CLASS_NAMES[code]}) slices",
                summary.class_counts.get(code, 0),
                expected,
            )
        )
    rows.append(("patients", summary.patients, EXPECTED_PATIENTS))
    return rows
