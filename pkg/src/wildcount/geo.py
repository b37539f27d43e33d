"""Geographic annotation conversion, image tiling, and patch labeling.

Coordinates follow the usual raster convention: x is the column index,
y is the row index, both zero-based. Patch extents are half-open
[x0, x0 + w) x [y0, y0 + h), so a point sitting exactly on the right or
bottom edge belongs to the next patch only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TilingError, TransformError

DEFAULT_PATCH_SIZE = 512
DEFAULT_OVERLAP_PX = 78
LABEL_EMPTY = "empty"
LABEL_NON_EMPTY = "non_empty"


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel -> ground mapping (GDAL convention).

    ground_x = origin_x + col * pixel_width + row * row_rotation
    ground_y = origin_y + col * col_rotation + row * pixel_height
    """

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    row_rotation: float = 0.0
    col_rotation: float = 0.0

    def __post_init__(self):
        if self.pixel_width == 0 or self.pixel_height == 0:
            raise TransformError("pixel_width and pixel_height must be nonzero")
        if abs(self.determinant) < 1e-15:
            raise TransformError("geotransform linear part is singular")

    @property
    def determinant(self) -> float:
        return self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation

    @classmethod
    def from_gdal(cls, values: Sequence[float]) -> "GeoTransform":
        """Build from the 6-value GDAL ordering
        (origin_x, pixel_width, row_rotation, origin_y, col_rotation, pixel_height)."""
        if len(values) != 6:
            raise TransformError(f"expected 6 geotransform values, got {len(values)}")
        ox, pw, rr, oy, cr, ph = (float(v) for v in values)
        return cls(origin_x=ox, origin_y=oy, pixel_width=pw, pixel_height=ph,
                   row_rotation=rr, col_rotation=cr)

    def to_gdal(self) -> tuple[float, float, float, float, float, float]:
        return (self.origin_x, self.pixel_width, self.row_rotation,
                self.origin_y, self.col_rotation, self.pixel_height)


def pixel_to_geo(p: tuple[float, float], gt: GeoTransform) -> tuple[float, float]:
    """Forward affine: fractional pixel (x, y) -> ground (x, y)."""
    x, y = p
    gx = gt.origin_x + x * gt.pixel_width + y * gt.row_rotation
    gy = gt.origin_y + x * gt.col_rotation + y * gt.pixel_height
    return gx, gy


def geo_to_pixel(p: tuple[float, float], gt: GeoTransform) -> tuple[float, float]:
    """Invert the affine: ground (x, y) -> fractional pixel (x, y)."""
    gx = p[0] - gt.origin_x
    gy = p[1] - gt.origin_y
    det = gt.determinant
    x = (gx * gt.pixel_height - gy * gt.row_rotation) / det
    y = (gy * gt.pixel_width - gx * gt.col_rotation) / det
    return x, y


@dataclass(frozen=True)
class PointAnnotation:
    """A single animal location in pixel coordinates (fractional allowed)."""

    image_id: str
    x: float
    y: float
    source_geo: tuple[float, float] | None = None


@dataclass
class PatchRecord:
    """One tile of a parent image.

    ``points`` are in patch-local coordinates. With ``dilation_px > 0`` at
    labeling time a record may carry label non_empty with zero local points
    (a body partially inside the patch); with no dilation the label and the
    point list always agree.
    """

    patch_id: str
    image_id: str
    origin: tuple[int, int]
    size: tuple[int, int]
    label: str
    points: list[PointAnnotation] = field(default_factory=list)
    nodata_fraction: float = 0.0
    padding: tuple[int, int] = (0, 0)  # reflect padding (right, bottom) for undersized parents

    def __post_init__(self):
        if self.label not in (LABEL_EMPTY, LABEL_NON_EMPTY):
            raise ValueError(f"bad patch label {self.label!r}")
        if not 0.0 <= self.nodata_fraction <= 1.0:
            raise ValueError("nodata_fraction outside [0, 1]")
        w, h = self.size
        for pt in self.points:
            if not (0 <= pt.x < w and 0 <= pt.y < h):
                raise ValueError(f"local point ({pt.x}, {pt.y}) outside {w}x{h} patch")


def tile_image(width: int, height: int, patch_size: int = DEFAULT_PATCH_SIZE,
               overlap_px: int = DEFAULT_OVERLAP_PX, allow_padding: bool = True,
               ) -> list[tuple[int, int]]:
    """Compute patch origins covering a width x height image.

    Origins advance by ``patch_size - overlap_px``; the final origin in each
    axis is clamped so the last patch ends exactly at the image edge. An image
    smaller than patch_size yields a single (0, 0) origin when padding is
    allowed (the patch is reflect-padded at crop time).
    """
    if width < 1 or height < 1:
        raise TilingError(f"empty image extent {width}x{height}")
    if patch_size < 1:
        raise TilingError(f"patch_size must be positive, got {patch_size}")
    if not 0 <= overlap_px < patch_size:
        raise TilingError(f"overlap {overlap_px} must satisfy 0 <= overlap < {patch_size}")
    if (width < patch_size or height < patch_size) and not allow_padding:
        raise TilingError(
            f"image {width}x{height} smaller than patch {patch_size} and padding disabled")

    stride = patch_size - overlap_px

    def axis_origins(extent: int) -> list[int]:
        if extent <= patch_size:
            return [0]
        last = extent - patch_size
        origins = list(range(0, last + 1, stride))
        if origins[-1] != last:
            origins.append(last)
        return origins

    return [(x0, y0) for y0 in axis_origins(height) for x0 in axis_origins(width)]


def label_patch(origin: tuple[int, int], size: tuple[int, int],
                points: Iterable[PointAnnotation], dilation_px: float = 0.0,
                ) -> tuple[str, list[PointAnnotation]]:
    """Assign the binary patch label and collect patch-local points.

    The patch is non_empty iff at least one point lies inside the extent
    expanded by ``dilation_px`` on all sides; only points strictly inside
    the unexpanded half-open extent are returned, shifted to local
    coordinates. Dilation models relabeling of patches holding only part
    of an animal body.
    """
    x0, y0 = origin
    w, h = size
    local: list[PointAnnotation] = []
    hit_dilated = False
    for pt in points:
        if (x0 - dilation_px <= pt.x < x0 + w + dilation_px
                and y0 - dilation_px <= pt.y < y0 + h + dilation_px):
            hit_dilated = True
        if x0 <= pt.x < x0 + w and y0 <= pt.y < y0 + h:
            local.append(PointAnnotation(image_id=pt.image_id, x=pt.x - x0, y=pt.y - y0,
                                         source_geo=pt.source_geo))
    return (LABEL_NON_EMPTY if hit_dilated else LABEL_EMPTY), local


def filter_margin_patch(patch: PatchRecord, nodata_threshold: float = 0.5) -> bool:
    """Return True to keep the patch. Drops pure-margin patches only:
    nodata fraction above the threshold and not a single annotation."""
    return not (patch.nodata_fraction > nodata_threshold and len(patch.points) == 0)


def validity_mask(image: np.ndarray, sentinel: int = 0) -> np.ndarray:
    """Boolean mask of valid pixels: a pixel is nodata iff all channels equal
    the sentinel value."""
    if image.ndim == 2:
        return image != sentinel
    return np.any(image != sentinel, axis=-1)


def nodata_fraction(mask: np.ndarray | None, origin: tuple[int, int],
                    size: tuple[int, int]) -> float:
    """Fraction of invalid pixels inside the patch extent. A missing mask
    means fully valid. Portions of the extent beyond the mask (padded
    patches) count as valid data for filtering purposes."""
    if mask is None:
        return 0.0
    x0, y0 = origin
    w, h = size
    window = mask[y0:min(y0 + h, mask.shape[0]), x0:min(x0 + w, mask.shape[1])]
    if window.size == 0:
        return 0.0
    invalid = int(window.size) - int(np.count_nonzero(window))
    return invalid / (w * h)


def crop_patch(image: np.ndarray, origin: tuple[int, int], patch_size: int) -> np.ndarray:
    """Extract a patch, reflect-padding on the right/bottom when the parent
    image is smaller than the patch."""
    x0, y0 = origin
    window = image[y0:y0 + patch_size, x0:x0 + patch_size]
    pad_y = patch_size - window.shape[0]
    pad_x = patch_size - window.shape[1]
    if pad_x == 0 and pad_y == 0:
        return window
    pad = [(0, pad_y), (0, pad_x)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(window, pad, mode="reflect")


def make_patch_id(image_id: str, origin: tuple[int, int]) -> str:
    return f"{image_id}:{origin[1]:06d}_{origin[0]:06d}"


def parse_patch_id(patch_id: str) -> tuple[str, tuple[int, int]]:
    """Inverse of make_patch_id: (image_id, (x0, y0))."""
    image_id, _, tail = patch_id.rpartition(":")
    try:
        row, col = tail.split("_")
        origin = (int(col), int(row))
    except ValueError as exc:
        raise ValueError(f"malformed patch id {patch_id!r}") from exc
    if not image_id:
        raise ValueError(f"malformed patch id {patch_id!r}")
    return image_id, origin


def build_patch_records(image_id: str, width: int, height: int,
                        points: Sequence[PointAnnotation],
                        patch_size: int = DEFAULT_PATCH_SIZE,
                        overlap_px: int = DEFAULT_OVERLAP_PX,
                        mask: np.ndarray | None = None,
                        dilation_px: float = 0.0,
                        nodata_threshold: float = 0.5,
                        drop_margins: bool = True) -> list[PatchRecord]:
    """Tile one image into labeled PatchRecords, filtering nodata margins."""
    records = []
    for origin in tile_image(width, height, patch_size, overlap_px):
        label, local = label_patch(origin, (patch_size, patch_size), points, dilation_px)
        frac = nodata_fraction(mask, origin, (patch_size, patch_size))
        pad_x = max(0, origin[0] + patch_size - width)
        pad_y = max(0, origin[1] + patch_size - height)
        rec = PatchRecord(
            patch_id=make_patch_id(image_id, origin), image_id=image_id,
            origin=origin, size=(patch_size, patch_size), label=label,
            points=local, nodata_fraction=frac, padding=(pad_x, pad_y))
        if not drop_margins or filter_margin_patch(rec, nodata_threshold):
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# File formats: annotation CSV, patch-manifest JSONL, geotransform sidecar
# ---------------------------------------------------------------------------

def read_annotations(path: str | Path) -> list[PointAnnotation]:
    """Read `image_id,x,y[,lon,lat]` CSV (UTF-8, one point per row)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: annotation CSV needs header image_id,x,y[,lon,lat]")
        for row in reader:
            geo = None
            if row.get("lon") not in (None, "") and row.get("lat") not in (None, ""):
                geo = (float(row["lon"]), float(row["lat"]))
            out.append(PointAnnotation(image_id=row["image_id"], x=float(row["x"]),
                                       y=float(row["y"]), source_geo=geo))
    return out


def write_annotations(path: str | Path, points: Iterable[PointAnnotation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x", "y", "lon", "lat"])
        for pt in points:
            lon, lat = pt.source_geo if pt.source_geo else ("", "")
            writer.writerow([pt.image_id, pt.x, pt.y, lon, lat])


def patch_to_json(rec: PatchRecord) -> dict:
    return {
        "patch_id": rec.patch_id,
        "image_id": rec.image_id,
        "origin": [int(rec.origin[0]), int(rec.origin[1])],
        "size": [int(rec.size[0]), int(rec.size[1])],
        "label": rec.label,
        "points": [[float(p.x), float(p.y)] for p in rec.points],
        "nodata_fraction": float(rec.nodata_fraction),
        "padding": [int(rec.padding[0]), int(rec.padding[1])],
    }


def patch_from_json(obj: dict) -> PatchRecord:
    return PatchRecord(
        patch_id=obj["patch_id"], image_id=obj["image_id"],
        origin=tuple(obj["origin"]), size=tuple(obj["size"]), label=obj["label"],
        points=[PointAnnotation(image_id=obj["image_id"], x=x, y=y) for x, y in obj["points"]],
        nodata_fraction=obj.get("nodata_fraction", 0.0),
        padding=tuple(obj.get("padding", (0, 0))))


def write_patch_manifest(path: str | Path, records: Iterable[PatchRecord]) -> None:
    """JSON-lines manifest, one PatchRecord per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(patch_to_json(rec)) + "\n")


def read_patch_manifest(path: str | Path) -> list[PatchRecord]:
    with open(path, encoding="utf-8") as fh:
        return [patch_from_json(json.loads(line)) for line in fh if line.strip()]


def load_geotransforms(path: str | Path) -> dict[str, GeoTransform]:
    """JSON sidecar: image_id -> 6-value GDAL geotransform."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {image_id: GeoTransform.from_gdal(values) for image_id, values in raw.items()}
