"""Command-line entry point: ``cellfusion {fuse,peaks,postprocess,eval,run}``.

Exit status is 0 on success, 2 for usage or input problems, 1 for anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

from . import config as cfg
from .fusion import fuse, fuse_two_stage
from .geometry import Detection, Source
from .heatmap import peaks_from_scales
from .ingest import (
    CropScoreTable,
    DatasetManifest,
    FormatError,
    atomic_write,
    group_by_image,
    load_crop_scores,
    load_detections,
    load_heatmap_dir,
    load_manifest,
    standardize_detections,
    write_detections,
)
from .metrics import SweepCurve, SweepPoint, evaluate, map50_95, summary_metrics, sweep
from .postprocess import MissingScoreError, PipelineTrace, run_pipeline, stub_scores

log = logging.getLogger("cellfusion")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (OSError, FormatError, ValueError, KeyError, MissingScoreError)


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage '{stage}' failed: {cause}")


# ---------------------------------------------------------------------------
# argument handling


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    common = parent.add_argument_group("common options")
    common.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="images processed concurrently")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    keys = parent.add_argument_group("configuration overrides")
    for key in cfg.KEYS:
        keys.add_argument(cfg.flag_for(key), dest=f"cfg:{key}", metavar="VALUE", help=f"override {key}")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="cellfusion", description="Cell detection fusion, post-processing and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", parents=[parent], help="merge detector CSVs (two-stage when a third is given)")
    p.add_argument("inputs", nargs="+", metavar="CSV", help="detector A, detector B[, heatmap detections]")

    p = sub.add_parser("peaks", parents=[parent], help="extract heatmap peaks as detections")
    p.add_argument("heatmaps", nargs="?", metavar="DIR", help="directory of <image_id>@<scale>.cyhm files")
    p.add_argument("--manifest", dest="cfg:io.manifest", metavar="PATH", help="manifest giving base grid sizes")

    p = sub.add_parser("postprocess", parents=[parent], help="NMS, density filter and classifier gate")
    p.add_argument("detections", metavar="CSV")
    p.add_argument("--manifest", dest="cfg:io.manifest", metavar="PATH")
    p.add_argument("--scores", dest="cfg:io.scores", metavar="PATH", help="crop-score CSV")
    p.add_argument("--skip-gate", action="store_true", help="run NMS and density filtering only")
    p.add_argument("--stub-scorer", action="store_true", help="score gated crops with the built-in stand-in")

    p = sub.add_parser("eval", parents=[parent],
                       help="TP, FP, recall, precision, F1 and mAP50-95, plus an optional sweep curve")
    p.add_argument("predictions", metavar="CSV")
    p.add_argument("--labels", dest="cfg:io.labels", metavar="DIR")
    p.add_argument("--manifest", dest="cfg:io.manifest", metavar="PATH")
    p.add_argument("--ap-variant", dest="cfg:eval.ap_variant", choices=["allpoint", "101pt"])
    p.add_argument("--sweep", action="store_true", help="also write sweep.csv")
    p.add_argument("--name", default="predictions", help="row label in the printed table")

    p = sub.add_parser("run", parents=[parent], help="full pipeline from a config file")
    p.add_argument("--skip-gate", action="store_true", help="run NMS and density filtering only")
    p.add_argument("--stub-scorer", action="store_true", help="score gated crops with the built-in stand-in")
    p.add_argument("--ap-variant", dest="cfg:eval.ap_variant", choices=["allpoint", "101pt"])
    return parser


def _resolve_config(args: argparse.Namespace) -> cfg.PipelineConfig:
    overrides = {}
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            key = name[4:]
            overrides[key] = cfg.parse_value(key, value)
    if getattr(args, "skip_gate", False):
        overrides["post.skip_gate"] = True
    return cfg.load_config(args.config, overrides)


def _require(value: str, what: str) -> str:
    if not value:
        raise ValueError(f"{what} is required (flag or config key)")
    return value


def _map_images(fn: Callable, image_ids: Sequence[str], jobs: int) -> list:
    if jobs > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, image_ids))
    return [fn(i) for i in image_ids]


# ---------------------------------------------------------------------------
# stage functions shared by the subcommands and ``run``


def stage_peaks(heatmap_dir: str, conf: cfg.PipelineConfig, manifest: DatasetManifest | None, jobs: int) -> list[Detection]:
    maps = load_heatmap_dir(heatmap_dir)
    dims = manifest.dims if manifest is not None else {}

    def work(image_id):
        base = None
        if image_id in dims:
            w, h = dims[image_id]
            base = (h, w)
        return peaks_from_scales(maps[image_id], conf.peaks, image_id, base)

    chunks = _map_images(work, sorted(maps), jobs)
    return [d for chunk in chunks for d in chunk]


def stage_fuse(a: list[Detection], b: list[Detection], heat: list[Detection] | None,
               conf: cfg.PipelineConfig, jobs: int) -> list[Detection]:
    if conf.standardize:
        size = conf.stage1.box_size
        a, b = standardize_detections(a, size), standardize_detections(b, size)
        heat = standardize_detections(heat, size) if heat is not None else None
    if heat is None:
        return fuse(a, b, conf.stage1, jobs)
    return fuse_two_stage(a, b, heat, conf.stage1, conf.stage2, jobs)


def stage_postprocess(dets: list[Detection], manifest: DatasetManifest, scores: CropScoreTable | None,
                      conf: cfg.PipelineConfig, jobs: int) -> tuple[list[Detection], PipelineTrace]:
    """Per-image pipeline; results concatenated in image-id order."""
    dims = manifest.dims
    groups = group_by_image(dets)
    unknown = sorted(set(groups) - set(dims))
    if unknown:
        raise ValueError(f"detections reference images missing from the manifest: {', '.join(unknown)}")
    image_ids = sorted(groups)
    results = _map_images(lambda i: run_pipeline(groups[i], dims[i], scores, conf.post), image_ids, jobs)
    kept = [d for k, _ in results for d in k]
    trace = PipelineTrace([e for _, t in results for e in t.entries])
    return kept, trace


def _check_known_images(preds: Sequence[Detection], manifest: DatasetManifest) -> None:
    unknown = sorted({p.image_id for p in preds} - set(manifest.dims))
    if unknown:
        raise ValueError(f"predictions reference images missing from the manifest: {', '.join(unknown)}")


def _sweep_before(fused: list[Detection], manifest: DatasetManifest, scores, conf: cfg.PipelineConfig,
                  jobs: int) -> SweepCurve:
    points = []
    for t in conf.eval.sweep_thresholds:
        kept, _ = stage_postprocess([d for d in fused if d.confidence >= t], manifest, scores, conf, jobs)
        s = summary_metrics(kept, manifest.ground_truths, conf.eval.iou_threshold)
        mean_ap, _ = map50_95(kept, manifest.ground_truths, conf.eval.ap_variant)
        points.append(SweepPoint(t, s.tp, s.fp, s.fn, s.precision, s.recall, s.f1, mean_ap))
    return SweepCurve(points)


def _counts_by_image(dets: Sequence[Detection]) -> str:
    groups = group_by_image(dets)
    lines = [f"{image_id}\t{len(groups[image_id])}" for image_id in sorted(groups)]
    lines.append(f"total\t{len(dets)}")
    return "\n".join(lines) + "\n"


def _scores_for(conf: cfg.PipelineConfig, dets: list[Detection], use_stub: bool) -> CropScoreTable | None:
    if conf.post.skip_gate:
        return None
    if use_stub:
        return stub_scores(dets, conf.post)
    if conf.io.scores:
        return load_crop_scores(conf.io.scores)
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_fuse(args: argparse.Namespace) -> int:
    conf = _resolve_config(args)
    if len(args.inputs) not in (2, 3):
        raise ValueError("fuse takes two or three detection CSVs")
    sources = (Source.DETECTOR_A, Source.DETECTOR_B, Source.HEATMAP)
    lists = [load_detections(p, s) for p, s in zip(args.inputs, sources)]
    heat = lists[2] if len(lists) == 3 else None
    fused = stage_fuse(lists[0], lists[1], heat, conf, args.jobs)
    write_detections(fused, Path(args.out) / "fused.csv")
    sys.stdout.write(_counts_by_image(fused))
    return EXIT_OK


def cmd_peaks(args: argparse.Namespace) -> int:
    conf = _resolve_config(args)
    heatmaps = _require(args.heatmaps or conf.io.heatmaps, "heatmap directory")
    manifest = load_manifest(conf.io.manifest) if conf.io.manifest else None
    dets = stage_peaks(heatmaps, conf, manifest, args.jobs)
    write_detections(dets, Path(args.out) / "peaks.csv")
    sys.stdout.write(_counts_by_image(dets))
    return EXIT_OK


def cmd_postprocess(args: argparse.Namespace) -> int:
    conf = _resolve_config(args)
    manifest = load_manifest(_require(conf.io.manifest, "manifest"))
    dets = load_detections(args.detections)
    scores = _scores_for(conf, dets, args.stub_scorer)
    kept, trace = stage_postprocess(dets, manifest, scores, conf, args.jobs)
    out = Path(args.out)
    write_detections(kept, out / "final.csv")
    atomic_write(out / "trace.csv", trace.to_csv())
    sys.stdout.write(_step_summary(trace))
    return EXIT_OK


def _step_summary(trace: PipelineTrace) -> str:
    c = trace.counts()
    after = trace.after_each_step()
    return (f"input\t{after['input']}\n"
            f"removed_by_nms\t{c['nms']}\nafter_nms\t{after['nms']}\n"
            f"removed_by_density\t{c['density']}\nafter_density\t{after['density']}\n"
            f"removed_by_gate\t{c['gate']}\nafter_gate\t{after['gate']}\n")


def _write_eval(preds: list[Detection], manifest: DatasetManifest, conf: cfg.PipelineConfig, out: Path,
                name: str, curve: SweepCurve | None) -> str:
    report = evaluate(preds, manifest.ground_truths, conf.eval.iou_threshold, conf.eval.ap_variant)
    table = report.table(name)
    atomic_write(out / "report.json", report.to_json())
    atomic_write(out / "report.txt", table)
    if curve is not None:
        atomic_write(out / "sweep.csv", curve.to_csv())
    return table


def cmd_eval(args: argparse.Namespace) -> int:
    conf = _resolve_config(args)
    manifest = load_manifest(_require(conf.io.manifest, "manifest"), _require(conf.io.labels, "label directory"))
    preds = load_detections(args.predictions)
    _check_known_images(preds, manifest)
    curve = None
    if args.sweep:
        curve = sweep(preds, manifest.ground_truths, conf.eval.sweep_thresholds, conf.eval.iou_threshold,
                      conf.eval.ap_variant)
    sys.stdout.write(_write_eval(preds, manifest, conf, Path(args.out), args.name, curve))
    return EXIT_OK


def _run_stage(name: str, fn: Callable):
    log.info("stage %s", name)
    try:
        return fn()
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_run(args: argparse.Namespace) -> int:
    conf = _resolve_config(args)
    io = conf.io
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def save(name: str, payload: str):
        atomic_write(out / name, payload)
        written.append(name)

    manifest = _run_stage("load", lambda: load_manifest(_require(io.manifest, "io.manifest"),
                                                        _require(io.labels, "io.labels")))
    save("config.txt", cfg.dump_config(conf))

    # stages hand over through the written files, so a run equals the subcommands chained by hand
    def peaks():
        dets = stage_peaks(_require(io.heatmaps, "io.heatmaps"), conf, manifest, args.jobs)
        write_detections(dets, out / "peaks.csv")
        written.append("peaks.csv")
        return load_detections(out / "peaks.csv", Source.HEATMAP)

    heat = _run_stage("peaks", peaks)

    def fusion():
        a = load_detections(_require(io.detector_a, "io.detector_a"), Source.DETECTOR_A)
        b = load_detections(_require(io.detector_b, "io.detector_b"), Source.DETECTOR_B)
        write_detections(stage_fuse(a, b, None, conf, args.jobs), out / "stage1.csv")
        write_detections(stage_fuse(a, b, heat, conf, args.jobs), out / "fused.csv")
        written.extend(["stage1.csv", "fused.csv"])
        return load_detections(out / "fused.csv")

    fused = _run_stage("fuse", fusion)

    def post():
        scores = _scores_for(conf, fused, args.stub_scorer)
        kept, trace = stage_postprocess(fused, manifest, scores, conf, args.jobs)
        write_detections(kept, out / "final.csv")
        save("trace.csv", trace.to_csv())
        written.append("final.csv")
        return load_detections(out / "final.csv"), trace, scores

    final, trace, scores = _run_stage("postprocess", post)

    def evaluation():
        _check_known_images(final, manifest)
        if conf.eval.sweep_order == "after":
            curve = sweep(final, manifest.ground_truths, conf.eval.sweep_thresholds, conf.eval.iou_threshold,
                          conf.eval.ap_variant)
        else:
            curve = _sweep_before(fused, manifest, scores, conf, args.jobs)
        table = _write_eval(final, manifest, conf, out, "final", curve)
        written.extend(["report.json", "report.txt", "sweep.csv"])
        return table

    table = _run_stage("eval", evaluation)

    hashes = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in sorted(set(written))}
    atomic_write(out / "outputs.json", json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(_step_summary(trace))
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse,
    "peaks": cmd_peaks,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "run": cmd_run,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_INPUT if isinstance(exc.cause, INPUT_ERRORS) else EXIT_INTERNAL
    except INPUT_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
