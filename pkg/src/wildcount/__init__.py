"""Weakly supervised detection and counting of animals in aerial imagery."""

__version__ = "0.1.0"

from .geo import (  # noqa: F401
    GeoTransform,
    PatchRecord,
    PointAnnotation,
    geo_to_pixel,
    label_patch,
    pixel_to_geo,
    tile_image,
)
from .metrics import (  # noqa: F401
    MatchResult,
    MetricsReport,
    bootstrap_ci,
    compute_ap,
    compute_mae,
    compute_prf,
    compute_tce,
    count_scatter_r2,
    match_points,
    patch_classification_metrics,
)
from .models import (  # noqa: F401
    BackboneConfig,
    Checkpoint,
    FidtTarget,
    PatchClassifierNet,
    PointDetectorNet,
    build_backbone,
    build_classifier,
    build_detector,
    fidt_target,
    transfer_backbone_weights,
)
