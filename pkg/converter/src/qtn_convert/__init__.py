"""Dataset converter: MATLAB v7.3 slice containers to QTNS files + manifest."""

from .convert import (
    ConversionReport,
    ConvertError,
    DatasetSummary,
    EXPECTED_CLASS_COUNTS,
    EXPECTED_PATIENTS,
    EXPECTED_SLICES,
    convert_archive,
    expected_full_rows,
    normalize_to_unit,
    verify_counts,
)
from .records import RecordError, SliceRecord, read_record
from .slicefile import write_manifest, write_slice

__version__ = "0.1.0"

__all__ = [
    "ConversionReport",
    "ConvertError",
    "DatasetSummary",
    "EXPECTED_CLASS_COUNTS",
    "EXPECTED_PATIENTS",
    "EXPECTED_SLICES",
    "RecordError",
    "SliceRecord",
    "convert_archive",
    "expected_full_rows",
    "normalize_to_unit",
    "read_record",
    "verify_counts",
    "write_manifest",
    "write_slice",
]
