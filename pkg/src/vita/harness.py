"""Evaluation harness: manifests, preprocessing, baseline-vs-astro CAM
evaluation, grid search over the modulation hyperparameters, and statistics.

Images are evaluated by parallel workers that share the immutable weights;
results are merged in manifest order, so reports are byte-identical for a
given configuration regardless of worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .astro import AstroParams
from .cam import (Heatmap, grad_cam, grad_cam_pp, minmax_normalize,
                  read_raw_f32, resize_bilinear, tokens_to_grid,
                  upsample_bilinear, write_pgm, write_raw_f32)
from .errors import LoadError, ManifestError
from .metrics import (MetricConfig, dsc, spearman, ssim,
                      wilcoxon_rank_sum_one_tailed)
from .model import VitConfig, VitWeights, forward

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
RESIZE_SHORTER_SIDE = 256
CROP_SIZE = 224

CAM_METHODS = {"gradcam": grad_cam, "gradcampp": grad_cam_pp}
METRIC_NAMES = ("spearman", "dsc", "ssim")


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    heatmap: str
    label: int
    expected_class: Optional[int] = None


@dataclass
class EvalRecord:
    image: str
    cam_method: str
    metric: str
    baseline: float
    astro: Optional[float]
    params: Optional[AstroParams]


@dataclass
class EvalResult:
    records: list
    failures: int
    parity_mismatches: int = 0  # predicted class != expected_class probes


@dataclass(frozen=True)
class GridSpace:
    k: tuple
    tau: tuple
    phi: tuple
    alpha: tuple
    beta: tuple

    def __post_init__(self):
        for name, vals in (("k", self.k), ("tau", self.tau), ("phi", self.phi),
                           ("alpha", self.alpha), ("beta", self.beta)):
            if len(vals) == 0:
                raise ValueError(f"GridSpace: empty candidate list for {name}")
        for k in self.k:
            if k < 0:
                raise ValueError(f"GridSpace: k {k} < 0")
        for tau in self.tau:
            if tau < 1:
                raise ValueError(f"GridSpace: tau {tau} < 1")
        for alpha in self.alpha:
            if alpha < 1.0:
                raise ValueError(f"GridSpace: alpha {alpha} < 1")
        for beta in self.beta:
            if not 0.0 < beta <= 1.0:
                raise ValueError(f"GridSpace: beta {beta} outside (0, 1]")

    @classmethod
    def default(cls) -> "GridSpace":
        return cls(k=(4, 6, 8), tau=(1, 2, 3), phi=(-0.5, -0.2, 0.0, 0.2, 0.5),
                   alpha=(1.05, 1.2, 1.5), beta=(0.005, 0.05, 0.25))

    def __len__(self) -> int:
        return (len(self.k) * len(self.tau) * len(self.phi)
                * len(self.alpha) * len(self.beta))

    def combinations(self) -> list:
        return [AstroParams(k=k, tau=t, phi=p, alpha=a, beta=b)
                for k, t, p, a, b in product(self.k, self.tau, self.phi,
                                             self.alpha, self.beta)]


@dataclass
class GridResult:
    params: AstroParams
    mean_metric: float
    images_used: int
    failures: int


@dataclass
class StatRow:
    cam_method: str
    metric: str
    baseline_mean: float
    baseline_median: float
    baseline_sd: float
    astro_mean: float
    astro_median: float
    astro_sd: float
    p_value: float


def load_manifest(path, num_classes: int = 1000) -> list:
    """Parse the evaluation CSV: image,heatmap,label[,expected_class]."""
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}:1: empty file, expected a header row")
        header = [h.strip() for h in header]
        if header not in (["image", "heatmap", "label"],
                          ["image", "heatmap", "label", "expected_class"]):
            raise ManifestError(
                f"{path}:1: bad header {header}, expected image,heatmap,label[,expected_class]")
        has_expected = len(header) == 4
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            image, heatmap, label_s = (v.strip() for v in row[:3])
            image = image if os.path.isabs(image) else os.path.join(base, image)
            heatmap = heatmap if os.path.isabs(heatmap) else os.path.join(base, heatmap)
            for p in (image, heatmap):
                if not os.path.isfile(p):
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
            try:
                label = int(label_s)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: label {label_s!r} is not an integer")
            if not 0 <= label < num_classes:
                raise ManifestError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            expected = None
            if has_expected and row[3].strip():
                try:
                    expected = int(row[3])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: expected_class {row[3]!r} is not an integer")
                if not 0 <= expected < num_classes:
                    raise ManifestError(f"{path}:{lineno}: expected_class {expected} outside [0, {num_classes})")
            entries.append(ManifestEntry(image=image, heatmap=heatmap, label=label,
                                         expected_class=expected))
    return entries


def preprocess_image(path, config: Optional[VitConfig] = None) -> np.ndarray:
    """Decode, resize shorter side to 256, center-crop 224, normalize.

    Returns [3, crop, crop] float64 in the channel-standardized domain.  The
    256/224 resize-to-crop ratio is the ImageNet evaluation convention; for
    non-default model geometries both sizes scale proportionally.
    """
    crop = CROP_SIZE if config is None else config.image_size
    resize_target = round(crop * RESIZE_SHORTER_SIDE / CROP_SIZE)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            short = min(w, h)
            if short != resize_target:
                scale = resize_target / short
                im = im.resize((round(w * scale), round(h * scale)), Image.BILINEAR)
            w, h = im.size
            left = (w - crop) // 2
            top = (h - crop) // 2
            im = im.crop((left, top, left + crop, top + crop))
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise LoadError(f"{path}: cannot decode image ({exc})") from exc
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1)


def load_ground_truth(path, resolution: int) -> np.ndarray:
    """Ground-truth relevance map -> [resolution, resolution] in [0, 1].

    Raw float32 payloads (``.f32`` plus JSON sidecar) are read directly;
    anything else is decoded as a grayscale image.  Values are min-max
    normalized, then bilinearly resized to the comparison resolution.
    """
    p = str(path)
    if p.endswith(".f32") or os.path.isfile(p + ".json"):
        heat = read_raw_f32(p)
    else:
        try:
            with Image.open(p) as im:
                heat = Heatmap(values=np.asarray(im.convert("L"), dtype=np.float64))
        except (UnidentifiedImageError, OSError) as exc:
            raise LoadError(f"{p}: cannot decode ground-truth heatmap ({exc})") from exc
    heat = Heatmap(values=minmax_normalize(heat.values))
    if heat.values.shape != (resolution, resolution):
        heat = resize_bilinear(heat, resolution, renormalize=True)
    return heat.values


def _cam_heatmap(bundle, config: VitConfig, cam_method: str, target: int,
                 resolution: int) -> Heatmap:
    bundle.backward(target)
    sa = tokens_to_grid(bundle, config)
    heat = CAM_METHODS[cam_method](sa)
    return upsample_bilinear(heat, resolution)


def _metric_fn(name: str, cfg: MetricConfig) -> Callable:
    if name == "spearman":
        return lambda a, b: spearman(a, b)
    if name == "dsc":
        return lambda a, b: dsc(a, b, cfg)
    if name == "ssim":
        return lambda a, b: ssim(a, b, cfg)
    raise ValueError(f"unknown metric {name!r}, expected one of {METRIC_NAMES}")


def _resolve_target(entry: ManifestEntry, logits: np.ndarray, target_class: str) -> int:
    if target_class == "predicted":
        return int(np.argmax(logits))
    if target_class == "label":
        return entry.label
    raise ValueError(f"target_class must be 'predicted' or 'label', got {target_class!r}")


def run_eval(manifest, weights: VitWeights, config: VitConfig,
             astro: Optional[AstroParams], cam_method: str,
             metric_cfg: Optional[MetricConfig] = None,
             target_class: str = "predicted", workers: int = 1,
             metrics=METRIC_NAMES) -> EvalResult:
    """Per-image CAM agreement with ground truth, baseline and modulated.

    Returns one record per (image, metric) in manifest order.  Images that
    fail anywhere (decode, forward, metric) are logged and skipped; the count
    lands in the result.  Prediction always comes from the unmodulated pass.
    """
    if cam_method not in CAM_METHODS:
        raise ValueError(f"unknown cam method {cam_method!r}, expected one of {sorted(CAM_METHODS)}")
    cfg = metric_cfg or MetricConfig()
    fns = {name: _metric_fn(name, cfg) for name in metrics}
    res = cfg.comparison_resolution

    def eval_one(entry: ManifestEntry):
        x = preprocess_image(entry.image, config)
        gt = load_ground_truth(entry.heatmap, res)
        base_bundle = forward(x, weights, config)
        target = _resolve_target(entry, base_bundle.logits, target_class)
        parity_bad = (entry.expected_class is not None
                      and int(np.argmax(base_bundle.logits)) != entry.expected_class)
        heat_b = _cam_heatmap(base_bundle, config, cam_method, target, res).values
        heat_a = None
        if astro is not None:
            astro_bundle = forward(x, weights, config, astro=astro)
            heat_a = _cam_heatmap(astro_bundle, config, cam_method, target, res).values
        records = []
        for name in metrics:
            records.append(EvalRecord(
                image=entry.image, cam_method=cam_method, metric=name,
                baseline=fns[name](heat_b, gt),
                astro=None if heat_a is None else fns[name](heat_a, gt),
                params=astro))
        return records, parity_bad

    records: list = []
    failures = 0
    parity_mismatches = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        def guarded(entry):
            try:
                return eval_one(entry)
            except Exception as exc:
                log.warning("skipping %s: %s", entry.image, exc)
                return None
        for outcome in pool.map(guarded, manifest):
            if outcome is None:
                failures += 1
                continue
            recs, parity_bad = outcome
            records.extend(recs)
            parity_mismatches += int(parity_bad)
    return EvalResult(records=records, failures=failures,
                      parity_mismatches=parity_mismatches)


def grid_search(manifest, weights: VitWeights, config: VitConfig,
                space: GridSpace, cam_method: str, metric: str,
                metric_cfg: Optional[MetricConfig] = None,
                target_class: str = "predicted", workers: int = 1) -> list:
    """Evaluate every parameter combination; rank by mean metric descending.

    Ties rank the cheaper (smaller k) configuration first, then lexicographic
    (tau, phi, alpha, beta).  Combinations whose every image fails get a NaN
    mean and sort last.  Preprocessing, ground truth, and the gradient target
    are computed once per image and shared across the whole sweep.
    """
    if len(manifest) == 0:
        raise ValueError("grid_search: empty manifest")
    if cam_method not in CAM_METHODS:
        raise ValueError(f"unknown cam method {cam_method!r}, expected one of {sorted(CAM_METHODS)}")
    cfg = metric_cfg or MetricConfig()
    fn = _metric_fn(metric, cfg)
    res = cfg.comparison_resolution

    prepared = []
    for entry in manifest:
        try:
            x = preprocess_image(entry.image, config)
            gt = load_ground_truth(entry.heatmap, res)
            base = forward(x, weights, config)
            target = _resolve_target(entry, base.logits, target_class)
            prepared.append((x, gt, target))
        except Exception as exc:
            log.warning("grid_search: skipping %s for all combinations: %s", entry.image, exc)

    def eval_combo(params: AstroParams) -> GridResult:
        values = []
        fails = len(manifest) - len(prepared)
        for x, gt, target in prepared:
            try:
                bundle = forward(x, weights, config, astro=params)
                heat = _cam_heatmap(bundle, config, cam_method, target, res).values
                values.append(fn(heat, gt))
            except Exception as exc:
                log.warning("grid_search: %s failed for one image: %s", params, exc)
                fails += 1
        mean = float(np.mean(values)) if values else float("nan")
        return GridResult(params=params, mean_metric=mean,
                          images_used=len(values), failures=fails)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(eval_combo, space.combinations()))

    def sort_key(r: GridResult):
        p = r.params
        nan = math.isnan(r.mean_metric)
        return (1 if nan else 0, 0.0 if nan else -r.mean_metric,
                p.k, p.tau, p.phi, p.alpha, p.beta)

    results.sort(key=sort_key)
    return results


def stats_report(records) -> list:
    """Per (cam method, metric): mean/median/sample SD of both sides and a
    one-tailed rank-sum p-value for the modulated side being greater."""
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.cam_method, rec.metric), []).append(rec)
    rows = []
    for (method, metric) in sorted(groups):
        recs = groups[(method, metric)]
        astro_vals = np.array([r.astro for r in recs if r.astro is not None])
        base_vals = np.array([r.baseline for r in recs])
        if len(recs) < 2 or astro_vals.size < 2:
            raise ValueError(
                f"stats_report: group ({method}, {metric}) needs >= 2 records with both values")
        rows.append(StatRow(
            cam_method=method, metric=metric,
            baseline_mean=float(base_vals.mean()),
            baseline_median=float(np.median(base_vals)),
            baseline_sd=float(base_vals.std(ddof=1)),
            astro_mean=float(astro_vals.mean()),
            astro_median=float(np.median(astro_vals)),
            astro_sd=float(astro_vals.std(ddof=1)),
            p_value=wilcoxon_rank_sum_one_tailed(astro_vals, base_vals)))
    return rows


def explain_single(image_path, weights: VitWeights, config: VitConfig,
                   astro: Optional[AstroParams], cam_method: str, out_base,
                   metric_cfg: Optional[MetricConfig] = None,
                   target_class: str = "predicted", label: Optional[int] = None):
    """Write <out>.pgm, <out>.f32, and <out>.json for one image.

    The sidecar carries the predicted class (always from the unmodulated
    pass), the gradient target, the modulation parameters, and the logits of
    the pass the heatmap came from.
    """
    if cam_method not in CAM_METHODS:
        raise ValueError(f"unknown cam method {cam_method!r}, expected one of {sorted(CAM_METHODS)}")
    cfg = metric_cfg or MetricConfig()
    x = preprocess_image(image_path, config)
    base_bundle = forward(x, weights, config)
    predicted = int(np.argmax(base_bundle.logits))
    if target_class == "label":
        if label is None:
            raise ValueError("target_class 'label' requires a label")
        target = int(label)
    else:
        target = predicted
    bundle = base_bundle if astro is None else forward(x, weights, config, astro=astro)
    heat = _cam_heatmap(bundle, config, cam_method, target, cfg.comparison_resolution)

    out_base = str(out_base)
    pgm_path, raw_path, sidecar_path = out_base + ".pgm", out_base + ".f32", out_base + ".json"
    write_pgm(heat, pgm_path)
    extra = {
        "image": str(image_path),
        "cam_method": cam_method,
        "predicted_class": predicted,
        "target_class": target,
        "astro": None if astro is None else asdict(astro),
        "logits": [float(v) for v in bundle.logits],
    }
    write_raw_f32(heat, raw_path, sidecar_path=sidecar_path, extra=extra)
    return pgm_path, raw_path, sidecar_path


def write_records_csv(records, path) -> None:
    """Per-image records; float cells use repr so re-parsing is lossless."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "cam_method", "metric", "baseline", "astro",
                         "k", "tau", "phi", "alpha", "beta"])
        for r in records:
            p = r.params
            writer.writerow([
                r.image, r.cam_method, r.metric, repr(r.baseline),
                "" if r.astro is None else repr(r.astro),
                *(["", "", "", "", ""] if p is None
                  else [p.k, p.tau, repr(p.phi), repr(p.alpha), repr(p.beta)]),
            ])


def read_records_csv(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            params = None
            if row["k"]:
                params = AstroParams(k=int(row["k"]), tau=int(row["tau"]),
                                     phi=float(row["phi"]), alpha=float(row["alpha"]),
                                     beta=float(row["beta"]))
            records.append(EvalRecord(
                image=row["image"], cam_method=row["cam_method"], metric=row["metric"],
                baseline=float(row["baseline"]),
                astro=float(row["astro"]) if row["astro"] else None,
                params=params))
    return records


def write_grid_csv(results, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "k", "tau", "phi", "alpha", "beta",
                         "mean_metric", "images_used", "failures"])
        for rank, r in enumerate(results, start=1):
            p = r.params
            writer.writerow([rank, p.k, p.tau, repr(p.phi), repr(p.alpha), repr(p.beta),
                             repr(r.mean_metric), r.images_used, r.failures])


def write_stats_json(rows, path, extra: Optional[dict] = None) -> None:
    payload = {"groups": [asdict(r) for r in rows]}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
