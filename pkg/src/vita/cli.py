"""Command-line interface.

Subcommands: eval (per-image records CSV), gridsearch (ranked parameter
table), explain (heatmap files for one image), stats (summary JSON from an
eval records CSV).  Every flag can also come from a JSON file passed via
--config whose keys mirror the flag names; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys

from .astro import AstroParams
from .harness import (METRIC_NAMES, GridSpace, explain_single, grid_search,
                      load_manifest, read_records_csv, run_eval, stats_report,
                      write_grid_csv, write_records_csv, write_stats_json)
from .model import VIT_B_16, VitConfig, load_weights

DEFAULTS = {
    "cam": "gradcam",
    "metric_grid": "ssim",
    "target_class": "predicted",
    "workers": 1,
}


def _add_common(sp, *, weights=True, manifest=True):
    sp.add_argument("--config", help="JSON file whose keys mirror these flags")
    if weights:
        sp.add_argument("--weights", help="checkpoint container file")
        sp.add_argument("--model-config",
                        help="JSON file with model geometry overrides (defaults to ViT-B/16)")
    if manifest:
        sp.add_argument("--manifest", help="CSV: image,heatmap,label[,expected_class]")
    sp.add_argument("--cam", choices=["gradcam", "gradcampp"])
    sp.add_argument("--metric", choices=list(METRIC_NAMES))
    sp.add_argument("--astro", help="modulation parameters k,tau,phi,alpha,beta")
    sp.add_argument("--target-class", dest="target_class", choices=["predicted", "label"])
    sp.add_argument("--out", help="output path (CSV/JSON) or basename (explain)")
    sp.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vita",
        description="Astrocyte-modulated ViT explainability: evaluation, "
                    "grid search, and heatmap export")
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="baseline-vs-modulated metrics per image")
    _add_common(p_eval)

    p_grid = sub.add_parser("gridsearch", help="rank modulation parameters by mean metric")
    _add_common(p_grid)
    p_grid.add_argument("--grid-k", help="comma list overriding the default k candidates")
    p_grid.add_argument("--grid-tau", help="comma list overriding tau candidates")
    p_grid.add_argument("--grid-phi", help="comma list overriding phi candidates")
    p_grid.add_argument("--grid-alpha", help="comma list overriding alpha candidates")
    p_grid.add_argument("--grid-beta", help="comma list overriding beta candidates")

    p_explain = sub.add_parser("explain", help="write heatmap files for one image")
    _add_common(p_explain, manifest=False)
    p_explain.add_argument("--image", help="input image path")
    p_explain.add_argument("--label", type=int, help="class index for --target-class label")

    p_stats = sub.add_parser("stats", help="summary statistics from an eval records CSV")
    _add_common(p_stats, weights=False, manifest=False)
    p_stats.add_argument("--records", help="records CSV produced by eval")

    return parser


def _merge_config_file(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    with open(args.config, "r", encoding="utf-8") as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError(f"{args.config}: config must be a JSON object")
    for key, value in values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr) or attr in ("config", "command"):
            raise ValueError(f"{args.config}: unknown config key {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise ValueError(f"missing required flag --{name.replace('_', '-')}")


def _model_config(args) -> VitConfig:
    if getattr(args, "model_config", None):
        with open(args.model_config, "r", encoding="utf-8") as fh:
            return VitConfig(**json.load(fh))
    return VIT_B_16


def _astro_params(args):
    if getattr(args, "astro", None) is None:
        return None
    if isinstance(args.astro, str):
        return AstroParams.parse(args.astro)
    return AstroParams(**args.astro)  # config-file form: an object


def _fill_defaults(args) -> None:
    if getattr(args, "cam", None) is None:
        args.cam = DEFAULTS["cam"]
    if getattr(args, "target_class", None) is None:
        args.target_class = DEFAULTS["target_class"]
    if getattr(args, "workers", None) is None:
        args.workers = DEFAULTS["workers"]


def _cmd_eval(args) -> int:
    _require(args, "weights", "manifest", "out")
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    manifest = load_manifest(args.manifest, num_classes=config.num_classes)
    metrics = (args.metric,) if args.metric else METRIC_NAMES
    result = run_eval(manifest, weights, config, _astro_params(args), args.cam,
                      target_class=args.target_class, workers=args.workers,
                      metrics=metrics)
    write_records_csv(result.records, args.out)
    print(f"eval: {len(result.records)} records from {len(manifest)} images -> {args.out}")
    print(f"eval: {result.failures} image failures, "
          f"{result.parity_mismatches} parity mismatches")
    return 0


def _parse_grid_list(text, conv):
    return tuple(conv(v) for v in text.split(","))


def _cmd_gridsearch(args) -> int:
    _require(args, "weights", "manifest", "out")
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    manifest = load_manifest(args.manifest, num_classes=config.num_classes)
    space = GridSpace.default()
    overrides = {}
    for name, conv in (("k", int), ("tau", int), ("phi", float),
                       ("alpha", float), ("beta", float)):
        raw = getattr(args, f"grid_{name}", None)
        if raw is not None:
            overrides[name] = (_parse_grid_list(raw, conv) if isinstance(raw, str)
                               else tuple(conv(v) for v in raw))
    if overrides:
        space = GridSpace(**{**space.__dict__, **overrides})
    metric = args.metric or DEFAULTS["metric_grid"]
    results = grid_search(manifest, weights, config, space, args.cam, metric,
                          target_class=args.target_class, workers=args.workers)
    write_grid_csv(results, args.out)
    best = results[0]
    print(f"gridsearch: {len(results)} combinations -> {args.out}")
    print(f"gridsearch: best {best.params} mean {metric} {best.mean_metric:.6f}")
    return 0


def _cmd_explain(args) -> int:
    _require(args, "weights", "image", "out")
    config = _model_config(args)
    weights = load_weights(args.weights, config)
    pgm, raw, sidecar = explain_single(
        args.image, weights, config, _astro_params(args), args.cam, args.out,
        target_class=args.target_class, label=getattr(args, "label", None))
    with open(sidecar, "r", encoding="utf-8") as fh:
        predicted = json.load(fh)["predicted_class"]
    print(f"explain: predicted class {predicted}")
    print(f"explain: wrote {pgm}, {raw}, {sidecar}")
    return 0


def _cmd_stats(args) -> int:
    _require(args, "records", "out")
    records = read_records_csv(args.records)
    rows = stats_report(records)
    write_stats_json(rows, args.out, extra={"num_records": len(records)})
    for row in rows:
        print(f"stats: {row.cam_method}/{row.metric} baseline mean "
              f"{row.baseline_mean:.4f} modulated mean {row.astro_mean:.4f} "
              f"p {row.p_value:.4g}")
    print(f"stats: wrote {args.out}")
    return 0


COMMANDS = {
    "eval": _cmd_eval,
    "gridsearch": _cmd_gridsearch,
    "explain": _cmd_explain,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _merge_config_file(args)
        _fill_defaults(args)
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
