"""Command line front end: qtn-convert SRC_DIR OUT_DIR [--expect-full].

Converts every readable record, prints a tally of the output, and exits 0
only when nothing went wrong: any skipped record, and any --expect-full
count mismatch, turns the exit status to 1 (bad command lines exit 2).
Skipped records are listed in OUT_DIR/errors.log with one reason per line.
"""

import argparse
import sys

from .convert import (
    ConvertError,
    convert_archive,
    expected_full_rows,
    verify_counts,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="qtn-convert",
        description=(
            "Convert per-slice MATLAB v7.3 containers into QTNS slice pairs "
            "plus a manifest the qtn trainer can read."
        ),
    )
    parser.add_argument("src_dir", help="directory holding the .mat source records")
    parser.add_argument("out_dir", help="destination for .qtns files and manifest.csv")
    parser.add_argument(
        "--expect-full",
        action="store_true",
        help=(
            "require the full public release: 3064 slices total, "
            "708 meningioma / 1426 glioma / 930 pituitary, from 233 "
            "patients; exit 1 and print a count table on any mismatch"
        ),
    )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        report = convert_archive(args.src_dir, args.out_dir)
    except ConvertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"converted {report.converted} record(s) into {args.out_dir}")
    if report.skipped:
        print(
            f"skipped {len(report.skipped)} record(s); reasons in {report.errors_path}",
            file=sys.stderr,
        )
    summary = verify_counts(args.out_dir)
    print(f"slices: {summary.slices}")
    for code in sorted(summary.class_counts):
        print(f"class {code} slices: {summary.class_counts[code]}")
    print(f"patients: {summary.patients}")
    status = 1 if report.skipped else 0
    if args.expect_full:
        rows = expected_full_rows(summary)
        mismatched = [r for r in rows if r[1] != r[2]]
        width = max(len(r[0]) for r in rows)
        print(f"{'quantity':<{width}}  {'found':>7}  {'expected':>8}")
        for name, found, expected in rows:
            marker = "ok" if found == expected else "MISMATCH"
            print(f"{name:<{width}}  {found:>7}  {expected:>8}  {marker}")
        if mismatched:
            print("full-release check failed", file=sys.stderr)
            status = 1
        else:
            print("full-release check passed")
    return status


if __name__ == "__main__":
    sys.exit(main())
