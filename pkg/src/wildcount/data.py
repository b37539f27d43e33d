"""Dataset machinery: leakage-free image splits, stratification reporting,
density statistics, the balanced binary batch sampler, and augmentation."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, SplitInfeasibleError
from .geo import LABEL_NON_EMPTY, PatchRecord, PointAnnotation

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test_2017"
SPLIT_HOLDOUT = "test_2019"
RATIO_SPLITS = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)


@dataclass(frozen=True)
class ImageInfo:
    image_id: str
    n_points: int
    herd: str = "default"
    holdout: bool = False  # e.g. a later survey year kept as its own test set


@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    point_counts: dict[str, int] = field(default_factory=dict)
    herd_proportions: dict[str, dict[str, float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def images(self, split: str) -> list[str]:
        return sorted(i for i, s in self.assignment.items() if s == split)

    def to_json(self) -> dict[str, str]:
        """The split-file interface is the plain image -> split mapping."""
        return dict(sorted(self.assignment.items()))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path, images: Sequence[ImageInfo] | None = None,
             ) -> "SplitAssignment":
        with open(path, encoding="utf-8") as fh:
            mapping = json.load(fh)
        split = cls(assignment=mapping)
        if images is not None:
            split._recompute_stats({i.image_id: i for i in images})
        return split

    def _recompute_stats(self, by_id: Mapping[str, ImageInfo]) -> None:
        counts: dict[str, int] = {}
        herd_pts: dict[str, dict[str, int]] = {}
        for image_id, split in self.assignment.items():
            info = by_id.get(image_id)
            if info is None:
                continue
            counts[split] = counts.get(split, 0) + info.n_points
            herd_pts.setdefault(split, {})
            herd_pts[split][info.herd] = herd_pts[split].get(info.herd, 0) + info.n_points
        self.point_counts = counts
        self.herd_proportions = {
            split: {herd: 100.0 * pts / total if (total := sum(per.values())) else 0.0
                    for herd, pts in per.items()}
            for split, per in herd_pts.items()
        }


def _required_splits(n_images: int) -> tuple[str, ...]:
    if n_images >= 3:
        return RATIO_SPLITS
    if n_images == 2:
        return (SPLIT_TRAIN, "eval")  # train plus at least one evaluation split
    return ()


def split_images(images: Sequence[ImageInfo],
                 ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
                 seed: int = 0,
                 tolerance_pp: float = 10.0) -> SplitAssignment:
    """Assign whole images to train/val/test so point-count shares track the
    ratios and every herd stays represented.

    Greedy largest-first on point counts, then a herd-coverage repair pass.
    Images flagged holdout go to the holdout test split unconditionally.
    Raises SplitInfeasibleError when a herd cannot cover its required splits
    (a herd with a single image cannot reach both train and an eval split).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios}")
    ratio_imgs = [i for i in images if not i.holdout]
    holdout_imgs = [i for i in images if i.holdout]
    result_warnings: list[str] = []
    assignment: dict[str, str] = {i.image_id: SPLIT_HOLDOUT for i in holdout_imgs}

    herds: dict[str, list[ImageInfo]] = {}
    for info in ratio_imgs:
        herds.setdefault(info.herd, []).append(info)
    if not herds:
        raise ConfigError("no images to split")

    if len(ratio_imgs) == 1:
        only = ratio_imgs[0]
        assignment[only.image_id] = SPLIT_TRAIN
        result_warnings.append(
            f"single image {only.image_id!r}: assigned to train; val/test are empty")
        out = SplitAssignment(assignment=assignment, warnings=result_warnings)
        out._recompute_stats({i.image_id: i for i in images})
        return out

    for herd, members in herds.items():
        if len(members) == 1:
            raise SplitInfeasibleError(
                herd, f"herd {herd!r} has one image; it cannot appear in train "
                      f"and an evaluation split")

    rng = np.random.default_rng(seed)
    total = sum(i.n_points for i in ratio_imgs) or 1
    targets = dict(zip(RATIO_SPLITS, ratios))
    fill = {s: 0.0 for s in RATIO_SPLITS}
    order = sorted(ratio_imgs, key=lambda i: (-i.n_points, i.image_id))

    def assign_greedy(info, fill_map, denom, weight):
        deficits = {s: targets[s] - fill_map[s] / denom for s in RATIO_SPLITS}
        best = max(deficits.values())
        choices = [s for s, d in deficits.items() if abs(d - best) < 1e-12]
        split = choices[int(rng.integers(len(choices)))] if len(choices) > 1 else choices[0]
        assignment[info.image_id] = split
        fill_map[split] += weight
        return split

    positive_imgs = [i for i in order if i.n_points > 0]
    empty_imgs = [i for i in order if i.n_points == 0]
    for info in positive_imgs:
        assign_greedy(info, fill, total, info.n_points)
    # zero-point images carry no point weight; spread them by image count so
    # every split keeps a stratified empty/non-empty mix
    img_fill = {s: 0.0 for s in RATIO_SPLITS}
    for info in empty_imgs:
        assign_greedy(info, img_fill, max(len(empty_imgs), 1), 1.0)

    # repair: make sure each herd covers its required splits
    def herd_split_members(herd: str) -> dict[str, list[ImageInfo]]:
        out: dict[str, list[ImageInfo]] = {s: [] for s in RATIO_SPLITS}
        for info in herds[herd]:
            out[assignment[info.image_id]].append(info)
        return out

    for herd in sorted(herds):
        required = _required_splits(len(herds[herd]))
        for _ in range(len(herds[herd]) + 3):
            members = herd_split_members(herd)
            missing = []
            for req in required:
                if req == "eval":
                    if not members[SPLIT_VAL] and not members[SPLIT_TEST]:
                        missing.append(SPLIT_TEST)
                elif not members[req]:
                    missing.append(req)
            if not missing:
                break
            target = missing[0]
            donors = [(s, info) for s in RATIO_SPLITS if s != target and len(members[s]) > 1
                      for info in members[s]]
            if not donors:
                donors = [(s, info) for s in RATIO_SPLITS if s != target and members[s]
                          and s not in required for info in members[s]]
            if not donors:
                raise SplitInfeasibleError(
                    herd, f"cannot place herd {herd!r} into split {target!r}")
            donors.sort(key=lambda d: (d[1].n_points, d[1].image_id))
            _, moved = donors[0]
            assignment[moved.image_id] = target
        else:
            raise SplitInfeasibleError(herd, f"herd {herd!r} coverage did not converge")

    out = SplitAssignment(assignment=assignment, warnings=result_warnings)
    out._recompute_stats({i.image_id: i for i in images})
    for split, ratio in targets.items():
        share = 100.0 * out.point_counts.get(split, 0) / total
        if abs(share - 100.0 * ratio) > tolerance_pp:
            out.warnings.append(
                f"{split} point share {share:.1f}% deviates more than "
                f"{tolerance_pp:.0f} pp from target {100 * ratio:.0f}%")
    return out


def stratify_ratio_report(split_counts: Mapping[str, tuple[int, int]],
                          flag_gap_pp: float = 2.0) -> dict:
    """Per-split non-empty percentage from (n_empty, n_non_empty) pairs.

    Empty splits report None. The train/val gap is flagged when it exceeds
    flag_gap_pp percentage points.
    """
    percents: dict[str, float | None] = {}
    for split, (n_empty, n_non_empty) in split_counts.items():
        total = n_empty + n_non_empty
        percents[split] = 100.0 * n_non_empty / total if total else None
    flagged = False
    if percents.get(SPLIT_TRAIN) is not None and percents.get(SPLIT_VAL) is not None:
        flagged = abs(percents[SPLIT_TRAIN] - percents[SPLIT_VAL]) > flag_gap_pp
    return {"non_empty_pct": percents, "train_val_gap_flagged": flagged}


def count_labels(patches: Iterable[PatchRecord]) -> tuple[int, int]:
    """(n_empty, n_non_empty) for a patch collection."""
    n_empty = n_non_empty = 0
    for rec in patches:
        if rec.label == LABEL_NON_EMPTY:
            n_non_empty += 1
        else:
            n_empty += 1
    return n_empty, n_non_empty


@dataclass
class DensityStats:
    zero_count: int
    bins: dict[int, int]
    quartiles: tuple[float, float, float] | None  # q1, median, q3 of non-empty counts
    min_count: int | None
    max_count: int | None

    def to_json(self) -> dict:
        return {
            "zero_count": self.zero_count,
            "bins": {str(k): v for k, v in sorted(self.bins.items())},
            "quartiles": list(self.quartiles) if self.quartiles else None,
            "min_count": self.min_count,
            "max_count": self.max_count,
        }


def density_histogram(patches: Iterable[PatchRecord]) -> DensityStats:
    """Distribution of annotation counts per patch; the zero bin is kept
    apart so the non-empty histogram sums to the non-empty patch count."""
    counts = [len(rec.points) for rec in patches]
    zero = sum(1 for c in counts if c == 0)
    nonzero = [c for c in counts if c > 0]
    bins: dict[int, int] = {}
    for c in nonzero:
        bins[c] = bins.get(c, 0) + 1
    if nonzero:
        q1, med, q3 = np.percentile(nonzero, [25, 50, 75])
        quartiles = (float(q1), float(med), float(q3))
        lo, hi = min(nonzero), max(nonzero)
    else:
        quartiles, lo, hi = None, None, None
    return DensityStats(zero_count=zero, bins=bins, quartiles=quartiles,
                        min_count=lo, max_count=hi)


@dataclass
class BatchPlan:
    """One epoch: each batch is a list of (patch_id, label) slots."""

    batches: list[list[tuple[str, str]]]

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


class BalancedBatchSampler:
    """Equal empty/non-empty batches that exhaust every non-empty patch once
    per epoch. Empty patches are drawn without replacement within the epoch,
    topping up with replacement only when the empty pool is too small. Used
    during training only, never for validation or test."""

    def __init__(self, empty_ids: Sequence[str], non_empty_ids: Sequence[str],
                 batch_size: int, seed: int = 0, drop_last: bool = False):
        if batch_size % 2 != 0 or batch_size < 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
        if not non_empty_ids:
            raise ConfigError("sampler needs at least one non-empty patch")
        self.empty_ids = list(empty_ids)
        self.non_empty_ids = list(non_empty_ids)
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last

    def epoch(self, epoch_index: int = 0) -> BatchPlan:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch_index)))
        half = self.batch_size // 2
        non_empty = [self.non_empty_ids[i]
                     for i in rng.permutation(len(self.non_empty_ids))]
        needed = len(non_empty)
        pool = [self.empty_ids[i] for i in rng.permutation(len(self.empty_ids))]
        if len(pool) >= needed:
            empties = pool[:needed]
        else:
            extra = rng.integers(0, len(self.empty_ids), size=needed - len(pool))
            empties = pool + [self.empty_ids[i] for i in extra]

        batches = []
        for start in range(0, needed, half):
            ne = non_empty[start:start + half]
            em = empties[start:start + len(ne)]  # truncate empty side to stay balanced
            if len(ne) < half and self.drop_last:
                break
            batches.append([(pid, LABEL_NON_EMPTY) for pid in ne]
                           + [(pid, "empty") for pid in em])
        return BatchPlan(batches=batches)


def binary_batch_sampler(empty_ids: Sequence[str], non_empty_ids: Sequence[str],
                         batch_size: int, seed: int = 0) -> BatchPlan:
    """One epoch of the balanced sampler (see BalancedBatchSampler)."""
    return BalancedBatchSampler(empty_ids, non_empty_ids, batch_size, seed).epoch(0)


# ---------------------------------------------------------------------------
# Augmentation: flips, 90-degree rotations, brightness/contrast jitter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometricAug:
    flip_h: bool = False
    flip_v: bool = False
    rot90_cw: int = 0  # quarter turns, clockwise


def transform_image(image: np.ndarray, aug: GeometricAug) -> np.ndarray:
    out = image
    if aug.flip_h:
        out = out[:, ::-1]
    if aug.flip_v:
        out = out[::-1, :]
    if aug.rot90_cw % 4:
        out = np.rot90(out, k=-(aug.rot90_cw % 4), axes=(0, 1))
    return np.ascontiguousarray(out)


def transform_points(points: np.ndarray, aug: GeometricAug, width: int, height: int,
                     ) -> np.ndarray:
    """Apply the same geometric op to (N, 2) x,y points, pixel-center exact:
    a hot pixel in a mask moves exactly where its coordinates do."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2).copy()
    w, h = width, height
    if aug.flip_h:
        pts[:, 0] = w - 1 - pts[:, 0]
    if aug.flip_v:
        pts[:, 1] = h - 1 - pts[:, 1]
    for _ in range(aug.rot90_cw % 4):
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = h - 1 - y
        pts[:, 1] = x
        w, h = h, w
    return pts


def augment(image: np.ndarray, points: np.ndarray, seed: int,
            brightness_jitter: float = 0.2, contrast_jitter: float = 0.2,
            ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train-time augmentation: geometric ops applied identically to
    image and points, photometric jitter applied to the image only.

    Input image may be uint8 or float; the result is float32 in [0, 1].
    """
    rng = np.random.default_rng(seed)
    aug = GeometricAug(flip_h=bool(rng.random() < 0.5),
                       flip_v=bool(rng.random() < 0.5),
                       rot90_cw=int(rng.integers(0, 4)))
    img = np.asarray(image, dtype=np.float32)
    if image.dtype == np.uint8:
        img = img / 255.0
    h, w = img.shape[:2]
    out_img = transform_image(img, aug)
    out_pts = transform_points(points, aug, w, h)

    b = 1.0 + rng.uniform(-brightness_jitter, brightness_jitter)
    c = 1.0 + rng.uniform(-contrast_jitter, contrast_jitter)
    out_img = out_img * b
    mean = out_img.mean()
    out_img = np.clip((out_img - mean) * c + mean, 0.0, 1.0)
    return out_img.astype(np.float32), out_pts


@dataclass
class TrainingPatch:
    """Patch pixels plus label and local points, ready for a data loader."""

    patch_id: str
    image: np.ndarray  # uint8 HWC
    label: str
    points: np.ndarray  # (N, 2) patch-local x, y

    @property
    def is_non_empty(self) -> bool:
        return self.label == LABEL_NON_EMPTY


def extract_training_patches(image_id: str, image: np.ndarray,
                             points: Sequence[PointAnnotation],
                             patch_size: int, overlap_px: int,
                             mask: np.ndarray | None = None,
                             dilation_px: float = 0.0,
                             nodata_threshold: float = 0.5) -> list[TrainingPatch]:
    """Tile one image into labeled TrainingPatches (margins filtered)."""
    from .geo import build_patch_records, crop_patch

    h, w = image.shape[:2]
    records = build_patch_records(image_id, w, h, points, patch_size, overlap_px,
                                  mask=mask, dilation_px=dilation_px,
                                  nodata_threshold=nodata_threshold)
    out = []
    for rec in records:
        pix = crop_patch(image, rec.origin, patch_size)
        pts = np.array([[p.x, p.y] for p in rec.points], dtype=float).reshape(-1, 2)
        out.append(TrainingPatch(patch_id=rec.patch_id, image=pix,
                                 label=rec.label, points=pts))
    return out


def patches_for_records(records: Sequence[PatchRecord],
                        images_by_id: Mapping[str, np.ndarray]) -> list[TrainingPatch]:
    """Materialize pixels for existing PatchRecords (e.g. mined negatives)."""
    from .geo import crop_patch

    out = []
    for rec in records:
        image = images_by_id[rec.image_id]
        pix = crop_patch(image, rec.origin, rec.size[0])
        pts = np.array([[p.x, p.y] for p in rec.points], dtype=float).reshape(-1, 2)
        out.append(TrainingPatch(patch_id=rec.patch_id, image=pix,
                                 label=rec.label, points=pts))
    return out


def patch_fingerprint(patches: Iterable[PatchRecord]) -> str:
    """Stable digest of patch identities, labels, and point counts; recorded
    in run manifests so identical data is recognizable across runs."""
    digest = hashlib.sha256()
    for rec in sorted(patches, key=lambda r: r.patch_id):
        digest.update(f"{rec.patch_id}|{rec.label}|{len(rec.points)}\n".encode())
    return digest.hexdigest()[:16]
