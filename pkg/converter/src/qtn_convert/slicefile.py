"""Writers for the slice-file and manifest formats the training package reads.

Deliberately self-contained: the converter emits the on-disk formats without
importing the training package, so the two sides stay coupled only through
the bytes.

A slice file is the magic ``QTNS``, a little-endian u32 version (1), a u8
kind code (1 image, 2 mask), a u8 dtype code (1 float32, 2 uint8), u32
height, u32 width, the row-major little-endian pixel data, and a trailing
CRC-32 of every preceding byte. Images carry float32 intensities; masks
carry uint8 class ids 0..3. The manifest is a CSV whose header is exactly
``image,mask,patient_id,plane,classes,split``, with slice paths relative to
the manifest's directory and classes a ';'-joined list of the tumor class
ids present in the mask (background omitted).
"""

import csv
import struct
import zlib

import numpy as np

MAGIC = b"QTNS"
VERSION = 1
KIND_CODES = {"image": 1, "mask": 2}
DTYPE_CODES = {"image": 1, "mask": 2}
MAX_DIM = 4096
MAX_CLASS = 3
MANIFEST_HEADER = ("image", "mask", "patient_id", "plane", "classes", "split")


def write_slice(path, array: np.ndarray, kind: str) -> None:
    """Serialize one 2-D slice; images as float32, masks as uint8."""
    if kind not in KIND_CODES:
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"slices are 2-D, got shape {arr.shape}")
    height, width = arr.shape
    if height > MAX_DIM or width > MAX_DIM:
        raise ValueError(f"slice dims {height}x{width} exceed the {MAX_DIM} limit")
    if kind == "image":
        data = np.ascontiguousarray(arr, dtype="<f4")
    else:
        if arr.size and (arr.min() < 0 or arr.max() > MAX_CLASS):
            raise ValueError(f"mask values must lie in 0..{MAX_CLASS}")
        data = np.ascontiguousarray(arr, dtype=np.uint8)
    body = (
        MAGIC
        + struct.pack(
            "<IBBII", VERSION, KIND_CODES[kind], DTYPE_CODES[kind], height, width
        )
        + data.tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def write_manifest(path, rows) -> None:
    """Write manifest rows (6-tuples matching MANIFEST_HEADER) as CSV.

    The line terminator is pinned to a bare newline so repeated conversions
    produce byte-identical manifests on any platform.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
