"""Training orchestration: patch-classifier pretraining, two-stage detector
training with hard-negative mining, early stopping, and run manifests."""

from __future__ import annotations

import copy
import csv
import json
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    BalancedBatchSampler,
    TrainingPatch,
    augment,
    patch_fingerprint,
)
from .errors import ConfigError, DivergenceError, TrainingError
from .geo import LABEL_EMPTY, LABEL_NON_EMPTY, PatchRecord, PointAnnotation, label_patch, make_patch_id, tile_image
from .models import (
    BackboneConfig,
    Checkpoint,
    INIT_EXTERNAL,
    INIT_SCRATCH,
    INIT_TRANSFER,
    PatchClassifierNet,
    PointDetectorNet,
    build_classifier,
    build_detector,
    fidt_target,
    save_checkpoint,
    snapshot,
    transfer_backbone_weights,
)

TASK_PPN = "ppn"
TASK_STAGE1 = "detector_stage1"
TASK_STAGE2 = "detector_stage2"

_DEFAULT_LR = {
    (TASK_PPN, INIT_SCRATCH): 1e-3,
    (TASK_PPN, INIT_EXTERNAL): 1e-4,
    (TASK_STAGE1, INIT_SCRATCH): 1e-3,
    (TASK_STAGE1, INIT_EXTERNAL): 1e-4,
    (TASK_STAGE1, INIT_TRANSFER): 1e-4,
    (TASK_STAGE2, None): 1e-6,
}
_DEFAULT_BATCH = {TASK_PPN: 32, TASK_STAGE1: 16, TASK_STAGE2: 16}


@dataclass
class TrainConfig:
    task: str
    init: str = INIT_SCRATCH
    learning_rate: float | None = None
    weight_decay: float = 3e-4
    batch_size: int | None = None
    patience: int = 15
    max_epochs: int = 100
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    external_weights: str | None = None
    heatmap_loss_weight: float = 1.0
    class_loss_weight: float = 1.0
    use_augment: bool = True
    drop_last: bool = False

    def __post_init__(self):
        if self.task not in (TASK_PPN, TASK_STAGE1, TASK_STAGE2):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.learning_rate is None:
            key = (self.task, None if self.task == TASK_STAGE2 else self.init)
            self.learning_rate = _DEFAULT_LR.get(key, 1e-4)
        if self.batch_size is None:
            self.batch_size = _DEFAULT_BATCH[self.task]
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        bbs_active = self.task in (TASK_PPN, TASK_STAGE2)
        if self.batch_size < 2 or (bbs_active and self.batch_size % 2 != 0):
            raise ConfigError(
                f"batch_size {self.batch_size} invalid for task {self.task} "
                f"(must be >= 2, even while the balanced sampler is active)")

    def to_json(self) -> dict:
        import dataclasses
        doc = dataclasses.asdict(self)
        doc["backbone"] = dataclasses.asdict(self.backbone)
        return doc


@dataclass
class RunManifest:
    run_id: str
    task: str
    config: dict
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint_path: str | None = None
    dataset_fingerprints: dict = field(default_factory=dict)
    hnp_counts: dict | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id, "task": self.task, "config": self.config,
            "train_losses": self.train_losses, "val_losses": self.val_losses,
            "stopping_epoch": self.stopping_epoch, "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss, "checkpoint_path": self.checkpoint_path,
            "dataset_fingerprints": self.dataset_fingerprints,
            "hnp_counts": self.hnp_counts, "notes": self.notes,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def save_loss_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1):
                writer.writerow([i, tr, va])


def should_stop_early(val_losses: Sequence[float], patience: int) -> bool:
    """Stop when the last `patience` epochs brought no strict improvement
    over the running minimum (i.e. the first minimum is `patience` or more
    epochs behind the latest entry)."""
    if not val_losses:
        raise ValueError("loss history is empty")
    best_idx = 0
    best = val_losses[0]
    for i, v in enumerate(val_losses):
        if v < best:
            best, best_idx = v, i
    return (len(val_losses) - 1 - best_idx) >= patience


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def classifier_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels)


def heatmap_focal_loss(logits: torch.Tensor, target: torch.Tensor,
                       alpha: float = 2.0, beta: float = 4.0,
                       peak: float = 1.0) -> torch.Tensor:
    """Penalty-reduced pixel-wise focal loss on the sigmoid heatmap; pixels
    at the target peak value count as positives, everything else is a
    down-weighted negative. Normalized by the positive count."""
    p = torch.sigmoid(logits).clamp(1e-6, 1 - 1e-6)
    pos = (target >= peak - 1e-6).to(p.dtype)
    neg = 1.0 - pos
    pos_loss = ((1 - p) ** alpha) * torch.log(p) * pos
    neg_loss = ((1 - target) ** beta) * (p ** alpha) * torch.log(1 - p) * neg
    n_pos = pos.sum().clamp(min=1.0)
    return -(pos_loss.sum() + neg_loss.sum()) / n_pos


def detector_loss(heat_logits: torch.Tensor, grid_logits: torch.Tensor,
                  heat_target: torch.Tensor, grid_target: torch.Tensor,
                  heatmap_weight: float = 1.0, class_weight: float = 1.0,
                  ) -> torch.Tensor:
    lh = heatmap_focal_loss(heat_logits, heat_target)
    lc = F.binary_cross_entropy_with_logits(grid_logits, grid_target)
    return heatmap_weight * lh + class_weight * lc


# ---------------------------------------------------------------------------
# Tensor plumbing
# ---------------------------------------------------------------------------

def _image_tensor(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if image.dtype == np.uint8:
        arr = arr / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)


def _aug_seed(seed: int, epoch: int, patch_id: str) -> int:
    # crc32 keeps the derived seed stable across processes (str hash is salted)
    digest = zlib.crc32(patch_id.encode())
    return int(np.random.SeedSequence((seed, epoch, digest)).generate_state(1)[0])


def _classifier_batch(patches: Sequence[TrainingPatch], cfg: TrainConfig,
                      epoch: int, train_mode: bool) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, labels = [], []
    for patch in patches:
        if train_mode and cfg.use_augment:
            img, _ = augment(patch.image, np.zeros((0, 2)),
                             seed=_aug_seed(cfg.seed, epoch, patch.patch_id))
        else:
            img = patch.image.astype(np.float32) / 255.0
        imgs.append(_image_tensor(img))
        labels.append(1.0 if patch.is_non_empty else 0.0)
    return torch.stack(imgs), torch.tensor(labels, dtype=torch.float32)


def _detector_batch(patches: Sequence[TrainingPatch], cfg: TrainConfig,
                    epoch: int, train_mode: bool,
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    stride = cfg.backbone.heatmap_stride
    imgs, heats, grids = [], [], []
    for patch in patches:
        if train_mode and cfg.use_augment:
            img, pts = augment(patch.image, patch.points,
                               seed=_aug_seed(cfg.seed, epoch, patch.patch_id))
        else:
            img = patch.image.astype(np.float32) / 255.0
            pts = patch.points
        h, w = img.shape[:2]
        target = fidt_target(pts / stride if len(pts) else pts,
                             (h // stride, w // stride),
                             down_factor=cfg.backbone.down_factor // stride)
        imgs.append(_image_tensor(img))
        heats.append(torch.from_numpy(target.heatmap))
        grids.append(torch.from_numpy(target.class_grid))
    return torch.stack(imgs), torch.stack(heats), torch.stack(grids)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}); aborting run")


def _finalize(model, cfg: TrainConfig, lineage, manifest: RunManifest,
              best_state, out_dir: str | Path | None, extra_meta: dict) -> Checkpoint:
    if best_state is not None:
        model.load_state_dict(best_state)
    meta = {"run_id": manifest.run_id, "task": cfg.task, "seed": cfg.seed,
            "epochs": manifest.stopping_epoch, "best_epoch": manifest.best_epoch,
            "best_val_loss": manifest.best_val_loss,
            "learning_rate": cfg.learning_rate, **extra_meta}
    ckpt = snapshot(model, lineage=lineage, meta=meta)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = save_checkpoint(ckpt, out / f"{manifest.run_id}.pt")
        manifest.checkpoint_path = str(path)
        manifest.save(out / f"{manifest.run_id}.manifest.json")
        manifest.save_loss_csv(out / f"{manifest.run_id}.losses.csv")
    return ckpt


# ---------------------------------------------------------------------------
# Patch-classifier pretraining
# ---------------------------------------------------------------------------

def train_patch_classifier(cfg: TrainConfig,
                           train_patches: Sequence[TrainingPatch],
                           val_patches: Sequence[TrainingPatch],
                           out_dir: str | Path | None = None,
                           run_id: str | None = None,
                           ) -> tuple[Checkpoint, RunManifest]:
    """BCE training over balanced empty/non-empty batches; the balanced
    sampler runs on the training set only. Returns the checkpoint of the
    epoch with minimum validation loss."""
    if cfg.task != TASK_PPN:
        raise ConfigError(f"config task {cfg.task!r} is not {TASK_PPN!r}")
    by_id = {p.patch_id: p for p in train_patches}
    empty_ids = [p.patch_id for p in train_patches if not p.is_non_empty]
    non_empty_ids = [p.patch_id for p in train_patches if p.is_non_empty]
    if not empty_ids or not non_empty_ids:
        raise ConfigError("training set must contain both empty and non-empty patches")

    torch.manual_seed(cfg.seed)
    model = build_classifier(cfg.backbone, init=cfg.init, seed=cfg.seed,
                             external_weights=cfg.external_weights)
    lineage = [cfg.init]
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    sampler = BalancedBatchSampler(empty_ids, non_empty_ids, cfg.batch_size,
                                   seed=cfg.seed, drop_last=cfg.drop_last)

    run_id = run_id or f"ppn_{cfg.init}_{cfg.seed}_{int(time.time())}"
    manifest = RunManifest(run_id=run_id, task=cfg.task, config=cfg.to_json(),
                           dataset_fingerprints={
                               "train": patch_fingerprint(train_patches),
                               "val": patch_fingerprint(val_patches)})
    from .models import parameter_count
    manifest.notes.append(f"model parameters: {parameter_count(model)}")
    best_state, best_val, best_epoch = None, math.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        epoch_losses = []
        for batch_slots in sampler.epoch(epoch):
            patches = [by_id[pid] for pid, _ in batch_slots]
            x, y = _classifier_batch(patches, cfg, epoch, train_mode=True)
            loss = classifier_loss(model(x), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        _check_finite(train_loss, "training loss")
        val_loss = evaluate_classifier_loss(model, val_patches, cfg.batch_size)
        _check_finite(val_loss, "validation loss")
        manifest.train_losses.append(train_loss)
        manifest.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        if should_stop_early(manifest.val_losses, cfg.patience):
            break
    manifest.stopping_epoch = len(manifest.val_losses)
    manifest.best_epoch, manifest.best_val_loss = best_epoch, best_val
    ckpt = _finalize(model, cfg, lineage, manifest, best_state, out_dir, {})
    return ckpt, manifest


@torch.no_grad()
def evaluate_classifier_loss(model: PatchClassifierNet,
                             patches: Sequence[TrainingPatch],
                             batch_size: int) -> float:
    if not patches:
        raise TrainingError("validation set is empty")
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        x = torch.stack([_image_tensor(p.image.astype(np.float32) / 255.0)
                         for p in chunk])
        y = torch.tensor([1.0 if p.is_non_empty else 0.0 for p in chunk])
        loss = classifier_loss(model(x), y)
        total += float(loss) * len(chunk)
        count += len(chunk)
    return total / count


@torch.no_grad()
def classifier_probabilities(model: PatchClassifierNet,
                             patches: Sequence[TrainingPatch],
                             batch_size: int = 32) -> np.ndarray:
    model.eval()
    probs = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        x = torch.stack([_image_tensor(p.image.astype(np.float32) / 255.0)
                         for p in chunk])
        probs.append(model.predict_proba(x).numpy())
    return np.concatenate(probs) if probs else np.zeros(0)


# ---------------------------------------------------------------------------
# Detector training, stage 1 (positives only)
# ---------------------------------------------------------------------------

def train_detector_stage1(cfg: TrainConfig,
                          train_positives: Sequence[TrainingPatch],
                          val_positives: Sequence[TrainingPatch],
                          ppn_checkpoint: Checkpoint | None = None,
                          out_dir: str | Path | None = None,
                          run_id: str | None = None,
                          epoch_hook=None,
                          ) -> tuple[Checkpoint, RunManifest]:
    """First-stage detector fit on positive patches, with initialization
    from scratch, an external weight file, or a transferred classifier
    backbone. Localization targets are generated on the fly from the
    (augmented) points. epoch_hook(epoch, model), when given, runs after
    each epoch's validation pass (it must not touch RNG state)."""
    if cfg.task != TASK_STAGE1:
        raise ConfigError(f"config task {cfg.task!r} is not {TASK_STAGE1!r}")
    for group, patches in (("train", train_positives), ("val", val_positives)):
        bad = [p.patch_id for p in patches if len(p.points) == 0]
        if bad:
            raise TrainingError(
                f"stage 1 uses positive patches only; {group} set has empty "
                f"patches {bad[:5]}")

    torch.manual_seed(cfg.seed)
    if cfg.init == INIT_TRANSFER:
        if ppn_checkpoint is None:
            raise ConfigError("ppn_transfer init needs a classifier checkpoint")
        model = build_detector(cfg.backbone, init=INIT_SCRATCH, seed=cfg.seed)
        transferred = transfer_backbone_weights(ppn_checkpoint, model, head_seed=cfg.seed)
        lineage = transferred.lineage
    else:
        model = build_detector(cfg.backbone, init=cfg.init, seed=cfg.seed,
                               external_weights=cfg.external_weights)
        lineage = [cfg.init]

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x57A6E1)))
    run_id = run_id or f"det1_{cfg.init}_{cfg.seed}_{int(time.time())}"
    manifest = RunManifest(run_id=run_id, task=cfg.task, config=cfg.to_json(),
                           dataset_fingerprints={
                               "train": patch_fingerprint(train_positives),
                               "val": patch_fingerprint(val_positives)})
    from .models import parameter_count
    manifest.notes.append(f"model parameters: {parameter_count(model)}")

    best_state, best_val, best_epoch = None, math.inf, 0
    order = list(range(len(train_positives)))
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_positives[i] for i in order[start:start + cfg.batch_size]]
            x, heat_t, grid_t = _detector_batch(chunk, cfg, epoch, train_mode=True)
            heat_logits, grid_logits = model(x)
            loss = detector_loss(heat_logits, grid_logits, heat_t, grid_t,
                                 cfg.heatmap_loss_weight, cfg.class_loss_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        train_loss = float(np.mean(epoch_losses))
        _check_finite(train_loss, "training loss")
        val_loss = evaluate_detector_loss(model, val_positives, cfg)
        _check_finite(val_loss, "validation loss")
        manifest.train_losses.append(train_loss)
        manifest.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        if epoch_hook is not None:
            epoch_hook(epoch, model)
            model.train()
        if should_stop_early(manifest.val_losses, cfg.patience):
            break
    manifest.stopping_epoch = len(manifest.val_losses)
    manifest.best_epoch, manifest.best_val_loss = best_epoch, best_val
    ckpt = _finalize(model, cfg, lineage, manifest, best_state, out_dir, {"stage": 1})
    return ckpt, manifest


@torch.no_grad()
def evaluate_detector_loss(model: PointDetectorNet,
                           patches: Sequence[TrainingPatch],
                           cfg: TrainConfig) -> float:
    if not patches:
        raise TrainingError("validation set is empty")
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(patches), cfg.batch_size):
        chunk = patches[start:start + cfg.batch_size]
        x, heat_t, grid_t = _detector_batch(chunk, cfg, epoch=0, train_mode=False)
        heat_logits, grid_logits = model(x)
        loss = detector_loss(heat_logits, grid_logits, heat_t, grid_t,
                             cfg.heatmap_loss_weight, cfg.class_loss_weight)
        total += float(loss) * len(chunk)
        count += len(chunk)
    return total / count


# ---------------------------------------------------------------------------
# Hard-negative mining and stage 2
# ---------------------------------------------------------------------------

def mine_hard_negatives(model: PointDetectorNet,
                        scenes: Sequence[tuple[str, np.ndarray, Sequence[PointAnnotation]]],
                        patch_size: int, overlap_px: int,
                        det_threshold: float, radius: float = 4.0,
                        class_gate: float | None = 0.5,
                        merge_radius: float = 4.0,
                        batch_size: int = 16) -> list[PatchRecord]:
    """Full-image inference over training scenes; every tiling patch that
    contains at least one unmatched detection and zero ground-truth points
    becomes a hard negative, labeled empty and de-duplicated by patch id."""
    from .infer import infer_full_image
    from .metrics import match_points

    hnps: dict[str, PatchRecord] = {}
    total_detections = 0
    for image_id, image, gt_points in scenes:
        result = infer_full_image(model, image, image_id=image_id,
                                  patch_size=patch_size, overlap_px=overlap_px,
                                  det_threshold=det_threshold, class_gate=class_gate,
                                  merge_radius=merge_radius, batch_size=batch_size)
        dets = np.array([[d.x, d.y, d.confidence] for d in result.detections],
                        dtype=float).reshape(-1, 3)
        total_detections += len(dets)
        gts = np.array([[p.x, p.y] for p in gt_points], dtype=float).reshape(-1, 2)
        match = match_points(dets, gts, radius=radius)
        fps = dets[match.fp, :2] if match.fp else np.zeros((0, 2))
        if not len(fps):
            continue
        h, w = image.shape[:2]
        for origin in tile_image(w, h, patch_size, overlap_px):
            x0, y0 = origin
            in_patch = ((fps[:, 0] >= x0) & (fps[:, 0] < x0 + patch_size)
                        & (fps[:, 1] >= y0) & (fps[:, 1] < y0 + patch_size))
            if not in_patch.any():
                continue
            label, local = label_patch(origin, (patch_size, patch_size), gt_points)
            if label == LABEL_NON_EMPTY or local:
                continue
            pid = make_patch_id(image_id, origin)
            hnps.setdefault(pid, PatchRecord(
                patch_id=pid, image_id=image_id, origin=origin,
                size=(patch_size, patch_size), label=LABEL_EMPTY, points=[]))
    if total_detections == 0:
        warnings.warn("mining produced no detections at all; empty HNP list")
    return [hnps[k] for k in sorted(hnps)]


def train_detector_stage2(cfg: TrainConfig,
                          stage1_checkpoint: Checkpoint,
                          train_positives: Sequence[TrainingPatch],
                          hnp_patches: Sequence[TrainingPatch],
                          val_positives: Sequence[TrainingPatch],
                          val_hnps: Sequence[TrainingPatch] = (),
                          out_dir: str | Path | None = None,
                          run_id: str | None = None,
                          ) -> tuple[Checkpoint, RunManifest]:
    """Second-stage fine-tuning on positives plus mined hard negatives.

    The balanced sampler pairs positives against hard negatives per batch;
    hard-negative targets are all-background. Validation uses the stage-1
    positives plus any provided validation-image hard negatives (that choice
    is recorded in the manifest, see notes)."""
    if cfg.task != TASK_STAGE2:
        raise ConfigError(f"config task {cfg.task!r} is not {TASK_STAGE2!r}")
    if not hnp_patches:
        raise ConfigError("stage 2 needs a non-empty hard-negative set")
    bad = [p.patch_id for p in hnp_patches if len(p.points)]
    if bad:
        raise TrainingError(f"hard negatives must hold zero points: {bad[:5]}")

    torch.manual_seed(cfg.seed)
    model = build_detector(cfg.backbone, init=INIT_SCRATCH, seed=cfg.seed)
    from .models import load_state_checked
    load_state_checked(model, stage1_checkpoint.clone_state(), "stage-1 checkpoint")

    run_id = run_id or f"det2_{cfg.seed}_{int(time.time())}"
    manifest = RunManifest(run_id=run_id, task=cfg.task, config=cfg.to_json(),
                           dataset_fingerprints={
                               "train_pos": patch_fingerprint(train_positives),
                               "hnp": patch_fingerprint(hnp_patches),
                               "val": patch_fingerprint(list(val_positives) + list(val_hnps))},
                           hnp_counts={"train": len(hnp_patches), "val": len(val_hnps),
                                       "train_positives": len(train_positives),
                                       "stage2_total": len(train_positives) + len(hnp_patches)})
    manifest.notes.append(
        "validation set = stage-1 validation positives plus mined validation-image "
        "hard negatives")
    stage1_lr = stage1_checkpoint.meta.get("learning_rate")
    if stage1_lr is not None and cfg.learning_rate >= stage1_lr:
        manifest.notes.append(
            f"stage-2 learning rate {cfg.learning_rate} is not lower than "
            f"stage-1 rate {stage1_lr}")

    by_id = {p.patch_id: p for p in list(train_positives) + list(hnp_patches)}
    sampler = BalancedBatchSampler([p.patch_id for p in hnp_patches],
                                   [p.patch_id for p in train_positives],
                                   cfg.batch_size, seed=cfg.seed,
                                   drop_last=cfg.drop_last)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    val_set = list(val_positives) + list(val_hnps)

    best_state, best_val, best_epoch = None, math.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        epoch_losses = []
        for batch_slots in sampler.epoch(epoch):
            chunk = [by_id[pid] for pid, _ in batch_slots]
            x, heat_t, grid_t = _detector_batch(chunk, cfg, epoch, train_mode=True)
            heat_logits, grid_logits = model(x)
            loss = detector_loss(heat_logits, grid_logits, heat_t, grid_t,
                                 cfg.heatmap_loss_weight, cfg.class_loss_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        train_loss = float(np.mean(epoch_losses))
        _check_finite(train_loss, "training loss")
        val_loss = evaluate_detector_loss(model, val_set, cfg)
        _check_finite(val_loss, "validation loss")
        manifest.train_losses.append(train_loss)
        manifest.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        if should_stop_early(manifest.val_losses, cfg.patience):
            break
    manifest.stopping_epoch = len(manifest.val_losses)
    manifest.best_epoch, manifest.best_val_loss = best_epoch, best_val
    ckpt = _finalize(model, cfg, stage1_checkpoint.lineage, manifest, best_state,
                     out_dir, {"stage": 2, "hnp_count": len(hnp_patches)})
    return ckpt, manifest
