"""Reader for the per-slice MATLAB v7.3 source containers.

Each source file is an HDF5 container holding one scan slice: an intensity
image, a binary tumor mask, an integer tumor-type code, and a patient
identifier. Mirrors of the public release differ slightly in where those
members live and what they are called, so the reader locates the record
group and each member by introspection against short fallback lists rather
than trusting one hard-coded schema.

Two MATLAB storage quirks are undone here. Matrices are written
column-major, so every 2-D array is transposed back after reading, and
character strings are stored as arrays of 16-bit character codes, which are
decoded back to text.
"""

from dataclasses import dataclass

import h5py
import numpy as np

GROUP_CANDIDATES = ("cjdata",)
IMAGE_KEYS = ("image",)
MASK_KEYS = ("tumorMask", "mask")
LABEL_KEYS = ("label",)
PATIENT_KEYS = ("PID", "pid", "patient_id")
KNOWN_LABELS = (1, 2, 3)


class RecordError(Exception):
    """A source file cannot be read as a slice record."""


@dataclass
class SliceRecord:
    """One decoded source slice, in row-major on-screen orientation."""

    image: np.ndarray
    mask: np.ndarray
    label: int
    patient_id: str


def _find_member(group, keys):
    for key in keys:
        node = group.get(key)
        if isinstance(node, h5py.Dataset):
            return node
    return None


def _require_member(group, keys, what):
    node = _find_member(group, keys)
    if node is None:
        raise RecordError(f"no {what} member; tried {', '.join(keys)}")
    return node


def _find_group(handle):
    """Locate the group holding the slice members.

    Preference order: a known container group name, then the file root
    itself, then any top-level group that owns an image member. Names
    starting with '#' are HDF5 reference bookkeeping, not record data.
    """
    for name in GROUP_CANDIDATES:
        node = handle.get(name)
        if isinstance(node, h5py.Group):
            return node
    if _find_member(handle, IMAGE_KEYS) is not None:
        return handle
    for name in sorted(handle):
        if name.startswith("#"):
            continue
        node = handle[name]
        if isinstance(node, h5py.Group) and _find_member(node, IMAGE_KEYS) is not None:
            return node
    raise RecordError("no group holding an image member")


def _decode_label(dataset):
    values = np.asarray(dataset[()]).ravel()
    if values.size != 1:
        raise RecordError(f"label member holds {values.size} values, expected 1")
    raw = float(values[0])
    code = int(round(raw))
    if abs(raw - code) > 1e-9:
        raise RecordError(f"label {raw} is not an integer")
    if code not in KNOWN_LABELS:
        raise RecordError(f"unknown label {code}, expected one of {KNOWN_LABELS}")
    return code


def _decode_patient(dataset):
    """Turn the patient member into a string.

    Handles the storage forms seen in the wild: an HDF5 byte string, a
    MATLAB character array saved as integer char codes, and a plain numeric
    identifier (a single number decodes as its decimal text).
    """
    value = dataset[()]
    if isinstance(value, bytes):
        text = value.decode("utf-8", "replace")
    else:
        arr = np.asarray(value)
        if arr.dtype.kind in ("S", "O"):
            text = b"".join(arr.ravel().tolist()).decode("utf-8", "replace")
        elif arr.dtype.kind == "U":
            text = "".join(arr.ravel().tolist())
        elif arr.size == 1:
            text = str(int(round(float(arr.ravel()[0]))))
        elif arr.dtype.kind in ("u", "i"):
            text = "".join(chr(int(c)) for c in arr.ravel())
        else:
            raise RecordError(f"patient member has unsupported dtype {arr.dtype}")
    text = text.strip().strip("\x00").strip()
    if not text:
        raise RecordError("empty patient identifier")
    return text


def _decode_matrix(dataset, what):
    arr = np.asarray(dataset[()])
    if arr.ndim != 2:
        raise RecordError(f"{what} member is {arr.ndim}-D, expected 2-D")
    return arr.T


def read_record(path) -> SliceRecord:
    """Decode one source container into a SliceRecord.

    Raises RecordError for anything that should make the caller skip the
    file: not an HDF5 container, missing members, a label outside 1..3, or
    mask dimensions that disagree with the image.
    """
    try:
        with h5py.File(path, "r") as handle:
            group = _find_group(handle)
            image = _decode_matrix(
                _require_member(group, IMAGE_KEYS, "image"), "image"
            ).astype(np.float64)
            mask_raw = _decode_matrix(
                _require_member(group, MASK_KEYS, "tumor mask"), "tumor mask"
            )
            label = _decode_label(_require_member(group, LABEL_KEYS, "label"))
            patient = _decode_patient(_require_member(group, PATIENT_KEYS, "patient id"))
    except OSError as exc:
        raise RecordError(f"not readable as an HDF5 container ({exc})") from exc
    if mask_raw.shape != image.shape:
        raise RecordError(
            f"mask shape {mask_raw.shape} does not match image shape {image.shape}"
        )
    return SliceRecord(image, mask_raw != 0, label, patient)
