"""Binary checkpoint container for named tensors plus a JSON config record.

Layout (all integers little-endian):

    magic "QTNW" | u32 version (=1) | u32 config length | config JSON (UTF-8)
    repeated per tensor:
        u32 name length | name (UTF-8) | u8 dtype code (1=f32, 2=f64)
        u32 rank | rank * u32 dims | raw little-endian row-major data
    u32 CRC-32 of every preceding byte

Tensors run until 4 bytes before end of file; there is no count field.
Writes go to a temporary file in the target directory and are renamed into
place, so a crashed writer never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"QTNW"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_RANK = 8


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class FormatError(CheckpointError):
    """The file is not a checkpoint or contains malformed fields."""


class VersionError(CheckpointError):
    """The file's format version is not supported by this reader."""


class ChecksumError(CheckpointError):
    """The trailing CRC-32 does not match the file contents."""


class TruncationError(CheckpointError):
    """The file ends before its declared contents do."""


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` (in iteration order) and ``config`` to ``path``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    record = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(record)))
    parts.append(record)
    for name, tensor in tensors.items():
        dtype = np.dtype(tensor.dtype)
        if dtype not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dtype], tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=dtype.newbyteorder("<")).tobytes())
    body = b"".join(parts)
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


class _Reader:
    def __init__(self, blob: bytes, limit: int):
        self.blob = blob
        self.limit = limit
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > self.limit:
            raise TruncationError(
                f"file ends at byte {self.limit} but a field needs bytes "
                f"{self.pos}..{self.pos + count}"
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read ``path`` back into its config dict and ordered tensor dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: missing {MAGIC!r} magic; not a checkpoint file")
    if len(blob) < 12:
        raise TruncationError(f"{path}: too short to hold a header")

    reader = _Reader(blob, len(blob) - 4)
    reader.pos = len(MAGIC)
    version = reader.u32()
    if version != VERSION:
        raise VersionError(f"{path}: file has format version {version}, reader supports {VERSION}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: config record is not valid JSON: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while reader.pos < reader.limit:
        name = reader.take(reader.u32()).decode("utf-8")
        code = reader.u8()
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        rank = reader.u32()
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: tensor {name!r} declares implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        data = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        native = np.float32 if code == 1 else np.float64
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(native)

    (stored,) = struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise ChecksumError(f"{path}: CRC-32 mismatch (stored {stored:#010x}, data {actual:#010x})")
    return config, tensors
