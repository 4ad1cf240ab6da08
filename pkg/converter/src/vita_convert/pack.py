"""Pack an image/heatmap source tree into an eval-ready dataset.

Input is a directory with an index.csv (image,heatmap,label and optionally
expected_class; paths relative to the directory). Output is a manifest CSV
next to copied images and min-max normalized raw float32 heatmaps, each with
a JSON sidecar carrying the geometry and where the data came from.

Deliberately single-threaded: the work is IO-bound and a stable processing
order is what makes packing reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConvertError

log = logging.getLogger(__name__)

INDEX_NAME = "index.csv"
_BASE_COLUMNS = ["image", "heatmap", "label"]
_OPTIONAL_COLUMN = "expected_class"


@dataclass
class PackReport:
    manifest: str
    rows_written: int
    duplicates_dropped: int
    pairs_skipped: int
    class_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class _Candidate:
    digest: str
    image_bytes: bytes
    image_suffix: str
    heatmap: np.ndarray  # [H, W] float64, raw values before normalization
    label: int
    expected_class: int | None
    source_image: str
    source_heatmap: str


def _load_heatmap(path: Path) -> np.ndarray:
    """Raw float32 payload with a sidecar, or any grayscale-decodable image."""
    p = str(path)
    sidecar = p + ".json"
    if p.endswith(".f32") or Path(sidecar).exists():
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        values = np.fromfile(p, dtype="<f4").astype(np.float64)
        w, h = int(meta["width"]), int(meta["height"])
        if values.size != w * h:
            raise ConvertError(f"{p}: payload has {values.size} values, sidecar says {w}x{h}")
        return values.reshape(h, w)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def _decode_image(raw: bytes) -> None:
    # full decode, not just a header sniff; downstream eval opens the copy
    with Image.open(io.BytesIO(raw)) as im:
        im.convert("RGB").load()


def _normalize(values: np.ndarray) -> np.ndarray:
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def _read_index(src: Path):
    index_path = src / INDEX_NAME
    if not index_path.exists():
        raise ConvertError(f"{src}: no {INDEX_NAME} found")
    with open(index_path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConvertError(f"{index_path}: empty index")
    header = [c.strip() for c in rows[0]]
    if header == _BASE_COLUMNS:
        has_expected = False
    elif header == _BASE_COLUMNS + [_OPTIONAL_COLUMN]:
        has_expected = True
    else:
        raise ConvertError(f"{index_path}: expected header {','.join(_BASE_COLUMNS)}"
                           f"[,{_OPTIONAL_COLUMN}], got {','.join(header)}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ConvertError(f"{index_path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        image, heatmap, label = (c.strip() for c in row[:3])
        try:
            label_i = int(label)
        except ValueError as exc:
            raise ConvertError(f"{index_path}:{lineno}: label {label!r} is not an integer") from exc
        expected = None
        if has_expected and row[3].strip():
            try:
                expected = int(row[3].strip())
            except ValueError as exc:
                raise ConvertError(f"{index_path}:{lineno}: expected_class {row[3]!r} "
                                   "is not an integer") from exc
        entries.append((image, heatmap, label_i, expected))
    return entries, has_expected


def pack_dataset(src_dir, out_dir, per_class: int, seed: int = 0) -> PackReport:
    """Select up to per_class pairs per label and write manifest plus data.

    Selection is a seeded draw without replacement, so the same source tree,
    per_class, and seed always produce byte-identical output. Duplicate
    images (by content hash) keep their first occurrence in index order;
    pairs that cannot be read are skipped with a warning.
    """
    if per_class < 1:
        raise ConvertError(f"per_class must be >= 1, got {per_class}")
    src = Path(src_dir)
    out = Path(out_dir)
    entries, has_expected = _read_index(src)

    seen: set[str] = set()
    by_label: dict[int, list[_Candidate]] = {}
    duplicates = 0
    skipped = 0
    for image_rel, heatmap_rel, label, expected in entries:
        image_path = src / image_rel
        heatmap_path = src / heatmap_rel
        try:
            raw = image_path.read_bytes()
            _decode_image(raw)
            heatmap = _load_heatmap(heatmap_path)
        except Exception as exc:
            log.warning("skipping %s / %s: %s", image_path, heatmap_path, exc)
            skipped += 1
            continue
        digest = hashlib.sha256(raw).hexdigest()
        if digest in seen:
            duplicates += 1
            continue
        seen.add(digest)
        by_label.setdefault(label, []).append(_Candidate(
            digest=digest,
            image_bytes=raw,
            image_suffix=image_path.suffix or ".png",
            heatmap=heatmap,
            label=label,
            expected_class=expected,
            source_image=image_rel,
            source_heatmap=heatmap_rel,
        ))

    # label-sorted iteration keeps RNG consumption order independent of the
    # index row order within a class
    rng = np.random.default_rng(seed)
    selected: list[_Candidate] = []
    class_counts: dict[int, int] = {}
    for label in sorted(by_label):
        candidates = by_label[label]
        if len(candidates) > per_class:
            keep = sorted(rng.choice(len(candidates), size=per_class, replace=False))
            candidates = [candidates[i] for i in keep]
        selected.extend(candidates)
        class_counts[label] = len(candidates)

    images_dir = out / "images"
    heatmaps_dir = out / "heatmaps"
    images_dir.mkdir(parents=True, exist_ok=True)
    heatmaps_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = out / "manifest.csv"
    header = _BASE_COLUMNS + ([_OPTIONAL_COLUMN] if has_expected else [])
    with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cand in selected:
            stem = f"{cand.label:04d}_{cand.digest[:12]}"
            image_name = f"images/{stem}{cand.image_suffix}"
            heatmap_name = f"heatmaps/{stem}.f32"
            (out / image_name).write_bytes(cand.image_bytes)
            values = _normalize(cand.heatmap).astype("<f4")
            values.tofile(out / heatmap_name)
            sidecar = {
                "width": int(values.shape[1]),
                "height": int(values.shape[0]),
                "normalization": "minmax",
                "source_image": cand.source_image,
                "source_heatmap": cand.source_heatmap,
                "image_sha256": cand.digest,
            }
            with open(out / (heatmap_name + ".json"), "w", encoding="utf-8") as sfh:
                json.dump(sidecar, sfh, indent=2, sort_keys=True)
                sfh.write("\n")
            row = [image_name, heatmap_name, str(cand.label)]
            if has_expected:
                row.append("" if cand.expected_class is None else str(cand.expected_class))
            writer.writerow(row)

    return PackReport(
        manifest=str(manifest_path),
        rows_written=len(selected),
        duplicates_dropped=duplicates,
        pairs_skipped=skipped,
        class_counts=class_counts,
    )
