"""Backbone, heads, target maps, and checkpoint plumbing.

The shared backbone is an encoder-decoder with hierarchical aggregation:
each encoder stage merges its own downsampled features with a pooled
projection of the previous level, and the decoder progressively upsamples
while fusing the matching encoder skip at every level. The desk-scale
config keeps the same topology as the full-scale one with narrower widths
and shallower blocks.

Two task networks share it: a patch classifier (pooled features, one
linear unit, sigmoid) and a point detector (full-resolution localization
heatmap plus a low-resolution presence grid).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import distance_transform_edt

from .errors import CheckpointError, ConfigError, TransferError

INIT_SCRATCH = "scratch"
INIT_EXTERNAL = "external_pretrained"
INIT_TRANSFER = "ppn_transfer"


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture knobs shared by the classifier and the detector.

    input_size is the nominal training patch size; the networks are fully
    convolutional and accept any input divisible by the deepest stride.
    heatmap_stride 1 decodes back to full resolution, 2 stops one level up.
    """

    scale: str = "desk"
    stage_channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    aggregation: str = "skip_merge"
    input_size: int = 512
    block_depth: int = 1
    down_factor: int = 16
    heatmap_stride: int = 1
    head_mode: str = "channel_vector"  # or "scalar": strict pooled-scalar head

    def __post_init__(self):
        if len(self.stage_channel_widths) < 2:
            raise ConfigError("need at least two stage widths")
        if any(w <= 0 for w in self.stage_channel_widths):
            raise ConfigError("stage widths must be positive")
        if self.heatmap_stride not in (1, 2):
            raise ConfigError("heatmap_stride must be 1 or 2")
        if self.head_mode not in ("channel_vector", "scalar"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        deepest = 2 ** (len(self.stage_channel_widths) - 1)
        if self.input_size % max(deepest, self.down_factor) != 0:
            raise ConfigError(
                f"input_size {self.input_size} must divide by stride {deepest} "
                f"and down_factor {self.down_factor}")

    @classmethod
    def desk(cls, input_size: int = 64, **kw) -> "BackboneConfig":
        return cls(scale="desk", stage_channel_widths=(16, 32, 64, 128),
                   input_size=input_size, block_depth=1, **kw)

    @classmethod
    def full(cls, input_size: int = 512, **kw) -> "BackboneConfig":
        return cls(scale="full", stage_channel_widths=(16, 32, 64, 128, 256, 512),
                   input_size=input_size, block_depth=2, **kw)

    @property
    def deepest_stride(self) -> int:
        return 2 ** (len(self.stage_channel_widths) - 1)

    @property
    def decoder_channels(self) -> int:
        return self.stage_channel_widths[self.heatmap_stride - 1] \
            if self.heatmap_stride == 1 else self.stage_channel_widths[1]


def config_hash(cfg: BackboneConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_to_json(cfg: BackboneConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_json(obj: dict) -> BackboneConfig:
    obj = dict(obj)
    if "stage_channel_widths" in obj:
        obj["stage_channel_widths"] = tuple(obj["stage_channel_widths"])
    return BackboneConfig(**obj)


def _conv_bn_relu(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True))


class _StageBlock(nn.Module):
    def __init__(self, cin: int, cout: int, depth: int):
        super().__init__()
        layers = [_conv_bn_relu(cin, cout, stride=2)]
        for _ in range(depth - 1):
            layers.append(_conv_bn_relu(cout, cout))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class _MergeNode(nn.Module):
    """Aggregation root: 1x1 fuse of two same-resolution feature maps."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.fuse = nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True))

    def forward(self, a, b):
        return self.fuse(torch.cat([a, b], dim=1))


class AggregationBackbone(nn.Module):
    """Encoder with per-stage skip-merge aggregation plus a progressive
    upsampling decoder.

    forward(x) for input (B, 3, S, S) returns (decoded, features):
      features[i] has stride 2**i and stage_channel_widths[i] channels;
      decoded has stride heatmap_stride and decoder_channels channels.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_channel_widths
        self.stem = _conv_bn_relu(3, widths[0])
        self.blocks = nn.ModuleList()
        self.lateral_pools = nn.ModuleList()
        self.stage_merges = nn.ModuleList()
        for i in range(1, len(widths)):
            self.blocks.append(_StageBlock(widths[i - 1], widths[i], cfg.block_depth))
            self.lateral_pools.append(nn.Sequential(
                nn.MaxPool2d(2),
                nn.Conv2d(widths[i - 1], widths[i], 1, bias=False),
                nn.BatchNorm2d(widths[i])))
            self.stage_merges.append(_MergeNode(2 * widths[i], widths[i]))

        stop = 0 if cfg.heatmap_stride == 1 else 1
        self.up_laterals = nn.ModuleList()
        self.up_merges = nn.ModuleList()
        self._decoder_levels = list(range(len(widths) - 2, stop - 1, -1))
        for i in self._decoder_levels:
            self.up_laterals.append(nn.Sequential(
                nn.Conv2d(widths[i + 1], widths[i], 1, bias=False),
                nn.BatchNorm2d(widths[i])))
            self.up_merges.append(_MergeNode(2 * widths[i], widths[i]))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = [self.stem(x)]
        for block, pool, merge in zip(self.blocks, self.lateral_pools, self.stage_merges):
            prev = feats[-1]
            feats.append(merge(block(prev), pool(prev)))
        d = feats[-1]
        for idx, i in enumerate(self._decoder_levels):
            up = F.interpolate(d, scale_factor=2, mode="nearest")
            d = self.up_merges[idx](self.up_laterals[idx](up), feats[i])
        return d, feats


def _init_scratch(module: nn.Module) -> None:
    """Kaiming-normal convolutions, Xavier-normal linear layers."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.xavier_normal_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class PatchClassifierNet(nn.Module):
    """Backbone plus a pooled binary head: decoder features are spatially
    averaged and a single linear map produces one logit. head_mode="scalar"
    is the strict pooled-scalar reading (mean over all dims, 1 -> 1 linear)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.backbone = AggregationBackbone(cfg)
        in_features = cfg.decoder_channels if cfg.head_mode == "channel_vector" else 1
        self.head = nn.Linear(in_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d, _ = self.backbone(x)
        if self.config.head_mode == "channel_vector":
            pooled = d.mean(dim=(2, 3))
        else:
            pooled = d.mean(dim=(1, 2, 3), keepdim=False).unsqueeze(1)
        return self.head(pooled).squeeze(1)

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(x))


def patch_probability(model: PatchClassifierNet, image: torch.Tensor) -> torch.Tensor:
    """Probability that each patch in the batch contains an animal."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return model.predict_proba(image)


class _ClassGridHead(nn.Module):
    """Presence scores on a grid downsampled by cfg.down_factor, built from
    the deepest encoder level (extra stride-2 convs or 2x upsampling bring
    the stride to the requested factor)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.stage_channel_widths[-1]
        stride = cfg.deepest_stride
        layers: list[nn.Module] = []
        while stride < cfg.down_factor:
            layers.append(_conv_bn_relu(c, c, stride=2))
            stride *= 2
        while stride > cfg.down_factor:
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(_conv_bn_relu(c, c, kernel=1))
            stride //= 2
        self.tower = nn.Sequential(*layers) if layers else nn.Identity()
        self.out = nn.Conv2d(c, 1, 1)

    def forward(self, deepest: torch.Tensor) -> torch.Tensor:
        return self.out(self.tower(deepest))


class PointDetectorNet(nn.Module):
    """Backbone plus a localization head (per-pixel heatmap logits at the
    decoder resolution) and a classification head (presence-grid logits at
    stride down_factor)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.backbone = AggregationBackbone(cfg)
        c = cfg.decoder_channels
        self.heatmap_head = nn.Sequential(
            nn.Conv2d(c, max(c // 2, 4), 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(max(c // 2, 4), 1, 3, padding=1))
        self.class_head = _ClassGridHead(cfg)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        d, feats = self.backbone(x)
        return self.heatmap_head(d).squeeze(1), self.class_head(feats[-1]).squeeze(1)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Bounded outputs: (heatmap in [0,1], presence scores in [0,1])."""
        heat_logits, grid_logits = self.forward(x)
        return torch.sigmoid(heat_logits), torch.sigmoid(grid_logits)


class MatchedFilterDetector(nn.Module):
    """Analytic dark-blob detector with the same predict contract as
    PointDetectorNet: a fixed ring-minus-center contrast filter whose
    heatmap peaks at dark ellipse centers. Deterministic by construction;
    used to exercise full-image stitching without a training run.

    The contrast response is Gaussian-smoothed before the sigmoid: long
    bodies otherwise leave a response ridge whose texture noise splits into
    several strict maxima further apart than the merge radius. Responses
    within the combined filter+blur radius of the patch border are
    unreliable (the kernels overhang the patch); that band is saturated to
    exactly 1.0: a constant plateau holds no strict local maximum and
    dominates any adjacent cut-off slope, so border artifacts yield no
    detections, while interior responses are exact and therefore land at
    identical positions in every overlapping patch."""

    def __init__(self, center_radius: int = 3, ring_radius: int = 8,
                 gain: float = 0.06, bias: float = 18.0, smooth_sigma: float = 1.5,
                 down_factor: int = 16):
        super().__init__()
        self.down_factor = down_factor
        self.gain = gain
        self.bias = bias

        def disk(radius):
            span = torch.arange(-radius, radius + 1, dtype=torch.float32)
            yy, xx = torch.meshgrid(span, span, indexing="ij")
            return ((xx ** 2 + yy ** 2) <= radius ** 2).float()

        center = disk(center_radius)
        outer = disk(ring_radius)
        pad = ring_radius - center_radius
        ring = outer - F.pad(center, (pad, pad, pad, pad))
        self.register_buffer("center_kernel", (center / center.sum())[None, None])
        self.register_buffer("ring_kernel", (ring / ring.sum())[None, None])
        blur_radius = max(1, int(3 * smooth_sigma))
        line = torch.exp(-torch.arange(-blur_radius, blur_radius + 1,
                                       dtype=torch.float32) ** 2
                         / (2 * smooth_sigma ** 2))
        line = line / line.sum()
        self.register_buffer("blur_kernel", (line[:, None] @ line[None, :])[None, None])
        self.center_radius = center_radius
        self.ring_radius = ring_radius
        self.blur_radius = blur_radius
        self.margin = ring_radius + blur_radius + 1

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gray = x.mean(dim=1, keepdim=True) * 255.0
        center = F.conv2d(gray, self.center_kernel, padding=self.center_radius)
        ring = F.conv2d(gray, self.ring_kernel, padding=self.ring_radius)
        resp = F.conv2d(ring - center, self.blur_kernel, padding=self.blur_radius)
        heat = torch.sigmoid(self.gain * (resp - self.bias)).squeeze(1)
        m = self.margin
        band = torch.ones_like(heat, dtype=torch.bool)
        band[:, m:-m, m:-m] = False
        heat = heat.masked_fill(band, 1.0)
        grid = F.max_pool2d(heat.unsqueeze(1), self.down_factor).squeeze(1)
        return heat, grid


# ---------------------------------------------------------------------------
# Localization targets
# ---------------------------------------------------------------------------

@dataclass
class FidtTarget:
    """Inverse-distance heatmap peaking at annotation pixels plus the
    presence grid. With constants (alpha, beta, c) the value at distance D
    from the nearest point is 1 / (D**(alpha*D + beta) + c), so annotation
    pixels score exactly 1/c and values decay strictly with distance."""

    heatmap: np.ndarray
    class_grid: np.ndarray
    alpha: float
    beta: float
    c: float
    floor: float


def fidt_target(points, size: tuple[int, int], alpha: float = 0.02,
                beta: float = 0.75, c: float = 1.0, floor: float = 0.0,
                down_factor: int = 16) -> FidtTarget:
    """Build the localization target for patch-local points.

    points: (N, 2) array-like of x, y in pixel units of the target map;
    size: (height, width). Points are rounded to the nearest pixel. An empty
    point set yields all-zero maps.
    """
    h, w = size
    gh, gw = (h + down_factor - 1) // down_factor, (w + down_factor - 1) // down_factor
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    heat = np.zeros((h, w), dtype=np.float32)
    grid = np.zeros((gh, gw), dtype=np.float32)
    if len(pts):
        xs = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        ys = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        vacant = np.ones((h, w), dtype=bool)
        vacant[ys, xs] = False
        dist = distance_transform_edt(vacant)
        heat = (1.0 / (np.power(dist, alpha * dist + beta) + c)).astype(np.float32)
        if floor > 0:
            heat[heat < floor] = 0.0
        grid[ys // down_factor, xs // down_factor] = 1.0
    return FidtTarget(heatmap=heat, class_grid=grid, alpha=alpha, beta=beta,
                      c=c, floor=floor)


# ---------------------------------------------------------------------------
# Checkpoints, initialization, and transfer
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Weights plus the initialization lineage and training metadata."""

    state: dict[str, torch.Tensor]
    lineage: list[str]
    meta: dict = field(default_factory=dict)

    def clone_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state.items()}


def snapshot(model: nn.Module, lineage: list[str], meta: dict | None = None) -> Checkpoint:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    cfg = getattr(model, "config", None)
    if cfg is not None:
        meta.setdefault("backbone_hash", config_hash(cfg))
        meta.setdefault("backbone_config", config_to_json(cfg))
    return Checkpoint(state=state, lineage=list(lineage), meta=meta)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Weight container plus a JSON metadata sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt.state, tmp)
    tmp.replace(path)
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"lineage": ckpt.lineage, "meta": ckpt.meta}, fh, indent=2)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    state = torch.load(path, map_location="cpu", weights_only=True)
    sidecar = path.with_suffix(".json")
    lineage, meta = [], {}
    if sidecar.exists():
        with open(sidecar, encoding="utf-8") as fh:
            doc = json.load(fh)
        lineage, meta = doc.get("lineage", []), doc.get("meta", {})
    return Checkpoint(state=state, lineage=lineage, meta=meta)


def load_state_checked(module: nn.Module, state: dict, context: str) -> None:
    """Strict load that reports every missing/unexpected/mismatched name."""
    own = module.state_dict()
    missing = [k for k in own if k not in state]
    unexpected = [k for k in state if k not in own]
    mismatched = [k for k in own if k in state and tuple(own[k].shape) != tuple(state[k].shape)]
    if missing or unexpected or mismatched:
        raise CheckpointError(
            f"{context}: missing={missing[:8]} unexpected={unexpected[:8]} "
            f"mismatched={mismatched[:8]}",
            missing=missing, unexpected=unexpected, mismatched=mismatched)
    module.load_state_dict(state)


def build_backbone(cfg: BackboneConfig, init: str = INIT_SCRATCH, seed: int = 0,
                   external_weights: str | Path | None = None) -> AggregationBackbone:
    """Seed-deterministic backbone: two scratch builds with the same seed are
    bitwise identical. init=external_pretrained loads a weight file saved
    from a backbone of the same configuration."""
    torch.manual_seed(seed)
    backbone = AggregationBackbone(cfg)
    _init_scratch(backbone)
    if init == INIT_EXTERNAL:
        if external_weights is None:
            raise ConfigError("external_pretrained init needs a weight file path")
        state = torch.load(external_weights, map_location="cpu", weights_only=True)
        load_state_checked(backbone, state, f"external weights {external_weights}")
    elif init != INIT_SCRATCH:
        raise ConfigError(f"unknown backbone init {init!r}")
    return backbone


def build_classifier(cfg: BackboneConfig, init: str = INIT_SCRATCH, seed: int = 0,
                     external_weights: str | Path | None = None) -> PatchClassifierNet:
    torch.manual_seed(seed)
    model = PatchClassifierNet(cfg)
    _init_scratch(model)
    if init == INIT_EXTERNAL:
        if external_weights is None:
            raise ConfigError("external_pretrained init needs a weight file path")
        state = torch.load(external_weights, map_location="cpu", weights_only=True)
        load_state_checked(model.backbone, state, f"external weights {external_weights}")
    elif init != INIT_SCRATCH:
        raise ConfigError(f"unknown classifier init {init!r}")
    return model


def build_detector(cfg: BackboneConfig, init: str = INIT_SCRATCH, seed: int = 0,
                   external_weights: str | Path | None = None) -> PointDetectorNet:
    torch.manual_seed(seed)
    model = PointDetectorNet(cfg)
    _init_scratch(model)
    if init == INIT_EXTERNAL:
        if external_weights is None:
            raise ConfigError("external_pretrained init needs a weight file path")
        state = torch.load(external_weights, map_location="cpu", weights_only=True)
        load_state_checked(model.backbone, state, f"external weights {external_weights}")
    elif init not in (INIT_SCRATCH, INIT_TRANSFER):
        raise ConfigError(f"unknown detector init {init!r}")
    return model


def transfer_backbone_weights(source: Checkpoint, detector: PointDetectorNet,
                              head_seed: int = 0) -> Checkpoint:
    """Move a trained classifier's backbone into a detector.

    Every backbone parameter and buffer is copied bitwise; the classifier
    head is discarded; the detector heads are freshly scratch-initialized.
    Returns the detector checkpoint with lineage extended by ppn_transfer.
    """
    want = config_hash(detector.config)
    got = source.meta.get("backbone_hash")
    if got != want:
        raise TransferError(
            f"backbone config hash mismatch: checkpoint {got} vs detector {want}")
    backbone_state = {k[len("backbone."):]: v for k, v in source.state.items()
                      if k.startswith("backbone.")}
    load_state_checked(detector.backbone, backbone_state, "transfer source backbone")
    torch.manual_seed(head_seed)
    _init_scratch(detector.heatmap_head)
    _init_scratch(detector.class_head)
    return snapshot(detector, lineage=source.lineage + [INIT_TRANSFER],
                    meta={"transferred_from": source.meta.get("run_id"),
                          "head_seed": head_seed})
