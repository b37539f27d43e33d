"""Command-line surface for the pipeline: tiling, splitting, training,
mining, inference, pre-screening, evaluation, synthetic suites, reports,
and the review service."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import WildcountError


def _fail(exc: Exception) -> None:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(doc), err=True)
    sys.exit(1)


def _run_manifest(out: Path, command: str, params: dict) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "params": params, "version": __version__,
           "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def _guarded(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (WildcountError, FileNotFoundError, ValueError, KeyError) as exc:
            _fail(exc)

    return wrapper


def load_train_config(path: str | Path):
    """TrainConfig from a TOML or JSON document; the backbone block maps to
    BackboneConfig fields."""
    from .models import config_from_json
    from .train import TrainConfig

    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib

        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    backbone = doc.pop("backbone", None)
    cfg = TrainConfig(**doc)
    if backbone is not None:
        cfg.backbone = config_from_json(backbone)
    return cfg


def _load_scene_data(data_dir: str):
    from .synth import load_benchmark

    bench = load_benchmark(data_dir)
    images = {s.scene_id: s.image for s in bench.scenes}
    points = {s.scene_id: s.points for s in bench.scenes}
    masks = {s.scene_id: s.mask for s in bench.scenes}
    return bench, images, points, masks


def _split_patches(manifest_path: str, split_path: str | None, images: dict):
    """Patch records grouped by split, materialized with pixels."""
    from .data import patches_for_records
    from .geo import read_patch_manifest

    records = read_patch_manifest(manifest_path)
    if split_path:
        with open(split_path, encoding="utf-8") as fh:
            assignment = json.load(fh)
    else:
        assignment = {rec.image_id: "train" for rec in records}
    grouped: dict[str, list] = {}
    for rec in records:
        split = assignment.get(rec.image_id)
        if split is None:
            continue
        grouped.setdefault(split, []).append(rec)
    return {split: patches_for_records(recs, images)
            for split, recs in grouped.items()}


@click.group()
@click.version_option(version=__version__, prog_name="wildcount")
def main():
    """Weakly supervised detection and counting for aerial wildlife surveys."""


@main.command()
@click.option("--suite", required=True,
              type=click.Choice(["separable", "cluttered", "dense", "sparse_edge"]))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guarded
def synth(suite, seed, out_dir):
    """Generate a synthetic benchmark suite (scenes, annotations, manifest)."""
    from .synth import generate_benchmark, write_benchmark

    bench = generate_benchmark(suite, seed)
    write_benchmark(bench, out_dir)
    _run_manifest(Path(out_dir) / "run_manifest.json", "synth",
                  {"suite": suite, "seed": seed})
    click.echo(f"wrote {len(bench.scenes)} scenes to {out_dir}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="Benchmark directory (scenes + annotations.csv + manifest.json)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--patch-size", type=int, default=None,
              help="Defaults to the suite's patch size")
@click.option("--overlap", "overlap_px", type=int, default=None,
              help="Defaults to the suite's overlap")
@click.option("--dilation", "dilation_px", type=float, default=0.0, show_default=True)
@click.option("--nodata-threshold", type=float, default=0.5, show_default=True)
@click.option("--geotransforms", "gt_path", type=click.Path(exists=True), default=None,
              help="JSON sidecar (image_id -> 6-value geotransform); annotation "
                   "rows carrying lon/lat are converted to pixel coordinates")
@_guarded
def tile(data_dir, out_path, patch_size, overlap_px, dilation_px, nodata_threshold,
         gt_path):
    """Tile scenes into labeled patches and write the JSONL manifest."""
    from .geo import (PointAnnotation, build_patch_records, geo_to_pixel,
                      load_geotransforms, write_patch_manifest)

    bench, images, points, masks = _load_scene_data(data_dir)
    patch_size = patch_size or bench.patch_size
    overlap_px = overlap_px if overlap_px is not None else bench.overlap_px
    transforms = load_geotransforms(gt_path) if gt_path else {}
    records = []
    for scene in bench.scenes:
        h, w = scene.image.shape[:2]
        mask = scene.mask if not scene.mask.all() else None
        scene_points = scene.points
        gt = transforms.get(scene.scene_id)
        if gt is not None:
            scene_points = [
                PointAnnotation(p.image_id, *geo_to_pixel(p.source_geo, gt),
                                source_geo=p.source_geo)
                if p.source_geo is not None else p
                for p in scene_points]
        records.extend(build_patch_records(
            scene.scene_id, w, h, scene_points, patch_size, overlap_px,
            mask=mask, dilation_px=dilation_px, nodata_threshold=nodata_threshold))
    write_patch_manifest(out_path, records)
    _run_manifest(Path(out_path).with_suffix(".run.json"), "tile",
                  {"data": str(data_dir), "patch_size": patch_size,
                   "overlap_px": overlap_px, "dilation_px": dilation_px,
                   "nodata_threshold": nodata_threshold, "n_patches": len(records)})
    click.echo(f"wrote {len(records)} patch records to {out_path}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--ratios", default="0.70,0.10,0.20", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--holdout-prefix", default=None,
              help="Scene-id prefix routed to the holdout test split")
@_guarded
def split(data_dir, out_path, ratios, seed, holdout_prefix):
    """Assign whole scenes to train/val/test without leakage."""
    from .data import ImageInfo, split_images

    bench, images, points, _ = _load_scene_data(data_dir)
    infos = [ImageInfo(image_id=sid, n_points=len(points[sid]), herd="default",
                       holdout=bool(holdout_prefix and sid.startswith(holdout_prefix)))
             for sid in sorted(images)]
    parts = tuple(float(x) for x in ratios.split(","))
    assignment = split_images(infos, ratios=parts, seed=seed)
    assignment.save(out_path)
    _run_manifest(Path(out_path).with_suffix(".run.json"), "split",
                  {"data": str(data_dir), "ratios": ratios, "seed": seed,
                   "point_counts": assignment.point_counts,
                   "warnings": assignment.warnings})
    for warning in assignment.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"wrote split for {len(infos)} images to {out_path}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--run-id", default=None)
@_guarded
def pretrain(data_dir, manifest_path, split_path, config_path, out_dir, run_id):
    """Train the patch classifier on empty/non-empty labels."""
    from .train import TASK_PPN, train_patch_classifier

    cfg = load_train_config(config_path)
    if cfg.task != TASK_PPN:
        raise WildcountError(f"pretrain needs a config with task={TASK_PPN!r}")
    _, images, _, _ = _load_scene_data(data_dir)
    grouped = _split_patches(manifest_path, split_path, images)
    ckpt, manifest = train_patch_classifier(
        cfg, grouped.get("train", []), grouped.get("val", []),
        out_dir=out_dir, run_id=run_id)
    click.echo(json.dumps({"run_id": manifest.run_id,
                           "best_val_loss": manifest.best_val_loss,
                           "stopping_epoch": manifest.stopping_epoch,
                           "checkpoint": manifest.checkpoint_path}))


@main.command()
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--ppn", "ppn_path", type=click.Path(exists=True),
              help="Classifier checkpoint for ppn_transfer initialization")
@click.option("--stage1", "stage1_path", type=click.Path(exists=True),
              help="Stage-1 checkpoint (stage 2 only)")
@click.option("--hnp", "hnp_path", type=click.Path(exists=True),
              help="Mined hard-negative manifest (stage 2 only)")
@click.option("--run-id", default=None)
@_guarded
def train(stage, data_dir, manifest_path, split_path, config_path, out_dir,
          ppn_path, stage1_path, hnp_path, run_id):
    """Train the point detector (stage 1 on positives, stage 2 with HNPs)."""
    from .data import patches_for_records
    from .geo import read_patch_manifest
    from .models import load_checkpoint
    from .train import (TASK_STAGE1, TASK_STAGE2, train_detector_stage1,
                        train_detector_stage2)

    cfg = load_train_config(config_path)
    _, images, _, _ = _load_scene_data(data_dir)
    grouped = _split_patches(manifest_path, split_path, images)
    positives = {s: [p for p in patches if p.is_non_empty]
                 for s, patches in grouped.items()}
    if stage == "1":
        if cfg.task != TASK_STAGE1:
            raise WildcountError(f"stage 1 needs task={TASK_STAGE1!r}")
        ppn_ckpt = load_checkpoint(ppn_path) if ppn_path else None
        ckpt, manifest = train_detector_stage1(
            cfg, positives.get("train", []), positives.get("val", []),
            ppn_checkpoint=ppn_ckpt, out_dir=out_dir, run_id=run_id)
    else:
        if cfg.task != TASK_STAGE2:
            raise WildcountError(f"stage 2 needs task={TASK_STAGE2!r}")
        if not stage1_path or not hnp_path:
            raise WildcountError("stage 2 needs --stage1 and --hnp")
        stage1_ckpt = load_checkpoint(stage1_path)
        hnp_records = read_patch_manifest(hnp_path)
        hnps = patches_for_records(hnp_records, images)
        ckpt, manifest = train_detector_stage2(
            cfg, stage1_ckpt, positives.get("train", []), hnps,
            positives.get("val", []), out_dir=out_dir, run_id=run_id)
    click.echo(json.dumps({"run_id": manifest.run_id,
                           "best_val_loss": manifest.best_val_loss,
                           "stopping_epoch": manifest.stopping_epoch,
                           "checkpoint": manifest.checkpoint_path}))


def _detector_from_checkpoint(ckpt_path: str):
    from .models import build_detector, config_from_json, load_checkpoint

    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_json(ckpt.meta["backbone_config"])
    model = build_detector(cfg, seed=0)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model, cfg, ckpt


def _classifier_from_checkpoint(ckpt_path: str):
    from .models import build_classifier, config_from_json, load_checkpoint

    ckpt = load_checkpoint(ckpt_path)
    cfg = config_from_json(ckpt.meta["backbone_config"])
    model = build_classifier(cfg, seed=0)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model, cfg, ckpt


@main.command("mine-hnp")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--subset", default="train", show_default=True)
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--threshold", type=float, default=None,
              help="Detection threshold; calibrated on val positives when omitted")
@click.option("--radius", type=float, default=4.0, show_default=True)
@_guarded
def mine_hnp(data_dir, split_path, subset, ckpt_path, out_path, threshold, radius):
    """Mine hard negative patches from full-image false positives."""
    from .data import patches_for_records
    from .geo import write_patch_manifest
    from .infer import calibrate_detector
    from .train import mine_hard_negatives

    bench, images, points, _ = _load_scene_data(data_dir)
    with open(split_path, encoding="utf-8") as fh:
        assignment = json.load(fh)
    model, cfg, _ = _detector_from_checkpoint(ckpt_path)
    if threshold is None:
        from .geo import build_patch_records

        val_ids = [sid for sid, s in assignment.items() if s == "val"]
        val_records = []
        for sid in val_ids:
            h, w = images[sid].shape[:2]
            val_records.extend(r for r in build_patch_records(
                sid, w, h, points[sid], bench.patch_size, bench.overlap_px)
                if r.label == "non_empty")
        val_patches = patches_for_records(val_records, images)
        threshold, _ = calibrate_detector(model, val_patches, radius=radius)
    scenes = [(sid, images[sid], points[sid])
              for sid, s in sorted(assignment.items()) if s == subset]
    hnps = mine_hard_negatives(model, scenes, bench.patch_size, bench.overlap_px,
                               det_threshold=threshold, radius=radius)
    write_patch_manifest(out_path, hnps)
    _run_manifest(Path(out_path).with_suffix(".run.json"), "mine-hnp",
                  {"data": str(data_dir), "subset": subset,
                   "threshold": threshold, "radius": radius, "n_hnps": len(hnps)})
    click.echo(f"mined {len(hnps)} hard negative patches at threshold "
               f"{threshold:.4f} -> {out_path}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--split", "split_path", type=click.Path(exists=True))
@click.option("--subset", default=None, help="Restrict to one split subset")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--merge-radius", type=float, default=4.0, show_default=True)
@click.option("--overlap", "overlap_px", type=int, default=None)
@_guarded
def infer(data_dir, ckpt_path, out_dir, split_path, subset, threshold,
          merge_radius, overlap_px):
    """Full-image detection and counting over scenes."""
    from .infer import infer_full_image, write_count_summary, write_detections_csv

    bench, images, points, _ = _load_scene_data(data_dir)
    overlap_px = overlap_px if overlap_px is not None else bench.overlap_px
    wanted = set(images)
    if split_path and subset:
        with open(split_path, encoding="utf-8") as fh:
            assignment = json.load(fh)
        wanted = {sid for sid, s in assignment.items() if s == subset}
    model, cfg, _ = _detector_from_checkpoint(ckpt_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for sid in sorted(wanted):
        counts.append(infer_full_image(model, images[sid], image_id=sid,
                                       patch_size=bench.patch_size,
                                       overlap_px=overlap_px,
                                       det_threshold=threshold,
                                       merge_radius=merge_radius))
    write_detections_csv(out / "detections.csv", counts)
    write_count_summary(out / "counts.json", counts)
    _write_service_meta(out, bench, data_dir, wanted, images, tau=None)
    _run_manifest(out / "run_manifest.json", "infer",
                  {"data": str(data_dir), "threshold": threshold,
                   "merge_radius": merge_radius, "overlap_px": overlap_px,
                   "total_count": sum(c.count for c in counts)})
    click.echo(json.dumps({sid: c.count for sid, c in
                           zip(sorted(wanted), counts)}))


def _write_service_meta(out: Path, bench, data_dir, wanted, images, tau):
    entries = {}
    for sid in sorted(wanted):
        h, w = images[sid].shape[:2]
        entries[sid] = {"path": str(Path(data_dir).resolve() / "scenes" / f"{sid}.png"),
                        "width": w, "height": h}
    doc = {"patch_size": bench.patch_size, "overlap_px": bench.overlap_px,
           "tau": tau, "images": entries}
    with open(out / "run_meta.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--tau", type=float, default=0.5, show_default=True)
@_guarded
def prescreen(data_dir, ckpt_path, out_dir, tau):
    """Flag likely-animal patches with the classifier (review work queue)."""
    from .infer import prescreen_patches, write_flagged_jsonl

    bench, images, _, _ = _load_scene_data(data_dir)
    model, cfg, _ = _classifier_from_checkpoint(ckpt_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flagged = []
    for sid in sorted(images):
        flagged.extend(prescreen_patches(model, images[sid], image_id=sid,
                                         patch_size=bench.patch_size,
                                         overlap_px=bench.overlap_px, tau=tau))
    flagged.sort(key=lambda f: (-f.probability, f.patch_id))
    write_flagged_jsonl(out / "flags.jsonl", flagged)
    _write_service_meta(out, bench, data_dir, set(images), images, tau=tau)
    _run_manifest(out / "run_manifest.json", "prescreen",
                  {"data": str(data_dir), "tau": tau, "n_flagged": len(flagged)})
    click.echo(f"flagged {len(flagged)} patches -> {out / 'flags.jsonl'}")


@main.command()
@click.option("--detections", "det_path", required=True, type=click.Path(exists=True))
@click.option("--annotations", "ann_path", required=True, type=click.Path(exists=True))
@click.option("--radius", type=float, default=4.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--bootstrap-seed", type=int, default=0, show_default=True)
@_guarded
def evaluate(det_path, ann_path, radius, out_path, bootstrap_seed):
    """Detection and counting metrics against ground-truth annotations."""
    from .geo import read_annotations
    from .infer import read_detections_csv
    from .metrics import evaluate_detections

    dets = read_detections_csv(det_path)
    gt: dict[str, list] = {}
    for p in read_annotations(ann_path):
        gt.setdefault(p.image_id, []).append((p.x, p.y))
    samples = []
    for image_id in sorted(set(dets) | set(gt)):
        d = np.array([[p.x, p.y, p.confidence] for p in dets.get(image_id, [])],
                     dtype=float).reshape(-1, 3)
        g = np.array(gt.get(image_id, []), dtype=float).reshape(-1, 2)
        samples.append((d, g))
    report = evaluate_detections(samples, radius=radius,
                                 bootstrap_seed=bootstrap_seed)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
    _run_manifest(Path(out_path).with_suffix(".run.json"), "evaluate",
                  {"detections": str(det_path), "annotations": str(ann_path),
                   "radius": radius})
    click.echo(json.dumps(report.to_json()))


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              help="Patch manifest for density statistics")
@click.option("--detections", "det_path", type=click.Path(exists=True),
              help="Detections CSV for the count scatter")
@click.option("--annotations", "ann_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--hist-png", "hist_png", type=click.Path(), default=None,
              help="Optional rendered density histogram")
@_guarded
def report(manifest_path, det_path, ann_path, out_path, hist_png):
    """Density statistics (JSON) or count-scatter data (CSV) for plotting."""
    if manifest_path:
        from .data import density_histogram
        from .geo import read_patch_manifest

        stats = density_histogram(read_patch_manifest(manifest_path))
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(stats.to_json(), fh, indent=2)
        if hist_png:
            _render_histogram(stats, hist_png)
        click.echo(f"wrote density stats to {out_path}")
    elif det_path and ann_path:
        from .geo import read_annotations
        from .infer import read_detections_csv

        dets = read_detections_csv(det_path)
        gt: dict[str, int] = {}
        for p in read_annotations(ann_path):
            gt[p.image_id] = gt.get(p.image_id, 0) + 1
        import csv as _csv

        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["image_id", "gt_count", "predicted_count"])
            for image_id in sorted(set(dets) | set(gt)):
                writer.writerow([image_id, gt.get(image_id, 0),
                                 len(dets.get(image_id, []))])
        click.echo(f"wrote count scatter to {out_path}")
    else:
        raise WildcountError("report needs --manifest or --detections/--annotations")
    _run_manifest(Path(out_path).with_suffix(".run.json"), "report",
                  {"manifest": manifest_path, "detections": det_path,
                   "annotations": ann_path})


def _render_histogram(stats, png_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    counts = sorted(stats.bins)
    ax.bar(counts, [stats.bins[c] for c in counts], width=0.9, color="#5b8")
    ax.set_xlabel("points per patch")
    ax.set_ylabel("patches")
    ax.set_title(f"density (zero bin: {stats.zero_count})")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


@main.command()
@click.option("--run", "run_dir", type=click.Path(exists=True), default=None,
              help="Run directory; defaults to $DATA_ROOT")
@click.option("--db", "db_path", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=None, help="Default $PORT or 8787")
@_guarded
def serve(run_dir, db_path, host, port):
    """Serve the human review API (and the UI when built)."""
    import os

    from .service import serve as run_service

    run_dir = run_dir or os.environ.get("DATA_ROOT")
    if not run_dir:
        raise WildcountError("serve needs --run or the DATA_ROOT environment variable")
    run_service(run_dir, db_path=db_path, host=host, port=port)


if __name__ == "__main__":
    main()
