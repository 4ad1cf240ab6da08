"""Command-line entry points: export-weights and pack-dataset."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConvertError
from .export import default_report_path, export_weights
from .pack import pack_dataset


def main_export(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-weights",
        description="Export a ViT checkpoint to the tensor-container format "
                    "with a verification report")
    parser.add_argument("--model", required=True,
                        help="checkpoint id, e.g. vit_base_patch16_224")
    parser.add_argument("--out", required=True, help="container file to write")
    parser.add_argument("--checkpoint",
                        help="state-dict file to export; omitted means a seeded random init")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the random init and the probe images")
    parser.add_argument("--probe-dir", dest="probe_dir",
                        help="where probe images go (default: <out stem>_probes/)")
    parser.add_argument("--probe-count", dest="probe_count", type=int, default=3)
    parser.add_argument("--report",
                        help="report JSON path (default: <out>.report.json)")
    args = parser.parse_args(argv)
    report_path = args.report or default_report_path(args.out)
    try:
        report = export_weights(args.model, args.out, checkpoint=args.checkpoint,
                                seed=args.seed, probe_dir=args.probe_dir,
                                probe_count=args.probe_count, report_path=report_path)
    except (ConvertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"export: {report.tensor_count} tensors -> {report.container} "
          f"(sha256 {report.container_sha256[:12]}...)")
    for probe in report.probes:
        print(f"probe {probe.image}: predicted class {probe.predicted_class}")
    print(f"report: {report_path}")
    return 0


def main_pack(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pack-dataset",
        description="Pack an image/heatmap tree (with index.csv) into a "
                    "manifest plus normalized heatmaps")
    parser.add_argument("--src", required=True, help="source directory containing index.csv")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--per-class", dest="per_class", type=int, required=True,
                        help="how many pairs to keep per label")
    parser.add_argument("--seed", type=int, default=0, help="selection seed")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = pack_dataset(args.src, args.out, args.per_class, seed=args.seed)
    except (ConvertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"pack: {report.rows_written} rows -> {report.manifest}")
    if report.duplicates_dropped:
        print(f"duplicates dropped: {report.duplicates_dropped}")
    if report.pairs_skipped:
        print(f"pairs skipped: {report.pairs_skipped}")
    return 0
