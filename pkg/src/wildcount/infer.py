"""Detector inference: peak extraction from heatmaps, full-image tiling and
stitching with overlap de-duplication, classifier pre-screening, and
operating-point calibration."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import maximum_filter

from .errors import CalibrationError
from .geo import crop_patch, make_patch_id, tile_image
from .metrics import DEFAULT_MATCH_RADIUS, match_points

FRAME_PATCH = "patch_local"
FRAME_IMAGE = "image_global"


@dataclass(frozen=True)
class DetectionPoint:
    x: float
    y: float
    confidence: float
    frame: str = FRAME_PATCH
    ref_id: str = ""  # patch_id in patch frame, image_id in global frame

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class ImageCount:
    image_id: str
    detections: list[DetectionPoint]

    @property
    def count(self) -> int:
        return len(self.detections)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "count": self.count}


def extract_points(heatmap: np.ndarray, class_scores: np.ndarray | None,
                   det_threshold: float, window: int = 3,
                   class_gate: float | None = 0.5,
                   heatmap_stride: int = 1,
                   patch_id: str = "") -> list[DetectionPoint]:
    """Detections are strict local maxima of the window x window
    neighborhood at or above the threshold, optionally gated by the
    presence grid cell covering the peak. Confidence is the heatmap value.

    With heatmap_stride > 1 the returned coordinates are mapped to image
    pixels at the stride-cell centers.
    """
    heat = np.asarray(heatmap, dtype=np.float32)
    if heat.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    footprint = np.ones((window, window), dtype=bool)
    footprint[window // 2, window // 2] = False
    neighbor_max = maximum_filter(heat, footprint=footprint, mode="constant",
                                  cval=-np.inf)
    peaks = (heat > neighbor_max) & (heat >= det_threshold)
    ys, xs = np.nonzero(peaks)
    out = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        if class_gate is not None and class_scores is not None:
            df_y = heat.shape[0] // class_scores.shape[0]
            df_x = heat.shape[1] // class_scores.shape[1]
            cell = class_scores[min(y // df_y, class_scores.shape[0] - 1),
                                min(x // df_x, class_scores.shape[1] - 1)]
            if cell < class_gate:
                continue
        px = x * heatmap_stride + (heatmap_stride - 1) / 2.0
        py = y * heatmap_stride + (heatmap_stride - 1) / 2.0
        out.append(DetectionPoint(x=float(px), y=float(py),
                                  confidence=float(heat[y, x]),
                                  frame=FRAME_PATCH, ref_id=patch_id))
    return out


def dedup_points(points: Sequence[DetectionPoint], merge_radius: float,
                 ) -> list[DetectionPoint]:
    """Greedy suppression on points: keep in descending confidence (ties by
    (x, y)), dropping any point within merge_radius of an already-kept one.
    Idempotent: a second pass changes nothing."""
    order = sorted(points, key=lambda d: (-d.confidence, d.x, d.y))
    kept: list[DetectionPoint] = []
    for det in order:
        if all((det.x - k.x) ** 2 + (det.y - k.y) ** 2 > merge_radius ** 2
               for k in kept):
            kept.append(det)
    return kept


def _patch_tensor_batch(image: np.ndarray, origins: Sequence[tuple[int, int]],
                        patch_size: int) -> torch.Tensor:
    crops = []
    for origin in origins:
        crop = crop_patch(image, origin, patch_size).astype(np.float32) / 255.0
        crops.append(torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1))
    return torch.stack(crops)


@torch.no_grad()
def infer_full_image(model, image: np.ndarray, image_id: str = "image",
                     patch_size: int = 512, overlap_px: int = 78,
                     det_threshold: float = 0.5,
                     merge_radius: float = DEFAULT_MATCH_RADIUS,
                     class_gate: float | None = 0.5,
                     window: int = 3, batch_size: int = 8,
                     heatmap_stride: int = 1) -> ImageCount:
    """Tile, run the detector per patch, map detections to global pixel
    coordinates, and merge overlap-zone duplicates keeping the highest
    confidence. The count is the length of the merged detection list."""
    if hasattr(model, "eval"):
        model.eval()
    h, w = image.shape[:2]
    origins = tile_image(w, h, patch_size, overlap_px)
    all_points: list[DetectionPoint] = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = _patch_tensor_batch(image, chunk, patch_size)
        heat, grid = model.predict(x)
        heat = heat.cpu().numpy()
        grid = grid.cpu().numpy()
        for i, origin in enumerate(chunk):
            local = extract_points(heat[i], grid[i], det_threshold, window=window,
                                   class_gate=class_gate,
                                   heatmap_stride=heatmap_stride,
                                   patch_id=make_patch_id(image_id, origin))
            for det in local:
                gx, gy = det.x + origin[0], det.y + origin[1]
                if gx >= w or gy >= h:  # reflected padding area
                    continue
                all_points.append(DetectionPoint(x=gx, y=gy,
                                                 confidence=det.confidence,
                                                 frame=FRAME_IMAGE, ref_id=image_id))
    return ImageCount(image_id=image_id, detections=dedup_points(all_points, merge_radius))


@dataclass(frozen=True)
class FlaggedPatch:
    patch_id: str
    image_id: str
    origin: tuple[int, int]
    probability: float

    def to_json(self) -> dict:
        return {"patch_id": self.patch_id, "image_id": self.image_id,
                "origin": [int(self.origin[0]), int(self.origin[1])],
                "probability": self.probability}


@torch.no_grad()
def prescreen_patches(classifier, image: np.ndarray, image_id: str = "image",
                      patch_size: int = 512, overlap_px: int = 78,
                      tau: float = 0.5, batch_size: int = 32) -> list[FlaggedPatch]:
    """Classifier pass over the tiling: patches scoring probability >= tau,
    sorted by descending probability, as a review work queue or inference
    filter."""
    classifier.eval()
    h, w = image.shape[:2]
    origins = tile_image(w, h, patch_size, overlap_px)
    flagged = []
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = _patch_tensor_batch(image, chunk, patch_size)
        probs = classifier.predict_proba(x).cpu().numpy()
        for origin, prob in zip(chunk, probs.tolist()):
            if prob >= tau:
                flagged.append(FlaggedPatch(patch_id=make_patch_id(image_id, origin),
                                            image_id=image_id, origin=origin,
                                            probability=float(prob)))
    flagged.sort(key=lambda f: (-f.probability, f.patch_id))
    return flagged


def calibrate_threshold(samples: Sequence[tuple[object, object]],
                        radius: float = DEFAULT_MATCH_RADIUS,
                        ) -> tuple[float, float]:
    """Sweep the decision threshold over the sorted unique confidences and
    return (threshold, f1_percent) at the F1 maximum. Ties prefer higher
    precision, then the higher threshold. With no detections at all the
    sentinel +inf threshold is returned with F1 = 0."""
    if not samples:
        raise CalibrationError("calibration needs at least one (detections, gt) unit")
    from .metrics import _ranked_tp_flags, prf_from_counts

    conf, flags, n_gt = _ranked_tp_flags(samples, radius)
    if len(conf) == 0:
        return math.inf, 0.0
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(~flags)
    group_end = np.ones(len(conf), dtype=bool)
    group_end[:-1] = conf[:-1] != conf[1:]
    best = (-1.0, -1.0, math.inf)  # f1, precision, threshold
    for i in np.nonzero(group_end)[0]:
        tp, fp = int(cum_tp[i]), int(cum_fp[i])
        fn = n_gt - tp
        precision, _, f1 = prf_from_counts(tp, fp, fn)
        tau = float(conf[i])
        cand = (f1, precision, tau)
        if (cand[0] > best[0]
                or (cand[0] == best[0] and cand[1] > best[1])
                or (cand[0] == best[0] and cand[1] == best[1] and tau > best[2])):
            best = cand
    return best[2], best[0]


@torch.no_grad()
def calibrate_detector(model, patches, radius: float = DEFAULT_MATCH_RADIUS,
                       class_gate: float | None = 0.5, window: int = 3,
                       batch_size: int = 16,
                       heatmap_stride: int = 1) -> tuple[float, float]:
    """Run the detector over validation patches and calibrate the detection
    threshold to the F1 maximum against their points."""
    if not patches:
        raise CalibrationError("calibration needs a non-empty validation set")
    samples = detector_patch_samples(model, patches, det_threshold=0.0,
                                     class_gate=class_gate, window=window,
                                     batch_size=batch_size,
                                     heatmap_stride=heatmap_stride)
    return calibrate_threshold(samples, radius)


@torch.no_grad()
def detector_patch_samples(model, patches, det_threshold: float,
                           class_gate: float | None = 0.5, window: int = 3,
                           batch_size: int = 16, heatmap_stride: int = 1,
                           merge_radius: float = DEFAULT_MATCH_RADIUS,
                           ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-patch (detections, ground_truth) pairs for metric computation.
    Detections pass the same point suppression as the full-image path, so
    evaluation and dedup share one spatial scale."""
    model.eval()
    samples = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        x = torch.stack([torch.from_numpy(
            np.ascontiguousarray(p.image.astype(np.float32) / 255.0)).permute(2, 0, 1)
            for p in chunk])
        heat, grid = model.predict(x)
        heat, grid = heat.cpu().numpy(), grid.cpu().numpy()
        for i, patch in enumerate(chunk):
            dets = dedup_points(
                extract_points(heat[i], grid[i], det_threshold, window=window,
                               class_gate=class_gate, heatmap_stride=heatmap_stride),
                merge_radius)
            samples.append((np.array([[d.x, d.y, d.confidence] for d in dets],
                                     dtype=float).reshape(-1, 3),
                            patch.points))
    return samples


def patch_detection_f1(model, patches, det_threshold: float,
                       radius: float = DEFAULT_MATCH_RADIUS,
                       class_gate: float | None = 0.5,
                       ) -> tuple[float, float, float]:
    """Pooled precision/recall/F1 of patch-level point detection."""
    from .metrics import prf_from_counts

    tp = fp = fn = 0
    for dets, gts in detector_patch_samples(model, patches, det_threshold,
                                            class_gate=class_gate):
        res = match_points(dets, gts, radius)
        tp, fp, fn = tp + res.n_tp, fp + res.n_fp, fn + res.n_fn
    return prf_from_counts(tp, fp, fn)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def write_detections_csv(path: str | Path, counts: Sequence[ImageCount]) -> None:
    """Global-frame detections: image_id,x,y,confidence."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x", "y", "confidence"])
        for item in counts:
            for det in item.detections:
                writer.writerow([item.image_id, det.x, det.y, det.confidence])


def read_detections_csv(path: str | Path) -> dict[str, list[DetectionPoint]]:
    out: dict[str, list[DetectionPoint]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image_id"], []).append(DetectionPoint(
                x=float(row["x"]), y=float(row["y"]),
                confidence=float(row["confidence"]),
                frame=FRAME_IMAGE, ref_id=row["image_id"]))
    return out


def write_count_summary(path: str | Path, counts: Sequence[ImageCount]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_json() for c in counts], fh, indent=2)


def write_flagged_jsonl(path: str | Path, flagged: Sequence[FlaggedPatch]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in flagged:
            fh.write(json.dumps(item.to_json()) + "\n")


def read_flagged_jsonl(path: str | Path) -> list[FlaggedPatch]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                out.append(FlaggedPatch(patch_id=doc["patch_id"],
                                        image_id=doc["image_id"],
                                        origin=tuple(doc["origin"]),
                                        probability=doc["probability"]))
    return out
