"""Deterministic synthetic aerial scenes for desk-scale experiments.

Animals are rendered as two-tone elongated ellipses (body plus a darker head
sub-ellipse contained in the body outline) over procedurally textured
backgrounds with optional clutter confusers. Realism is not the goal:
separability and clutter level are the controlled variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import PlacementError
from .geo import PointAnnotation, read_annotations, write_annotations

CLUTTER_TYPES = ("rocks", "logs", "snow", "water_texture", "shadow")
SUITE_NAMES = ("separable", "cluttered", "dense", "sparse_edge")


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_animals: int | None = 0
    density_per_patch: float | None = None  # Poisson rate per patch_size^2 area
    patch_size: int = 64
    length_range: tuple[float, float] = (5.0, 14.0)
    width_range: tuple[float, float] = (4.0, 7.0)
    clutter: tuple[str, ...] = ()
    clutter_intensity: float = 0.0
    contrast: float = 0.8
    seed: int = 0
    nodata_margin: int = 0
    occlusion_budget: float = 0.0
    placement_margin: float = 10.0
    min_separation: float | None = None  # extra pairwise center distance floor
    edge_band: tuple[float, float] | None = None  # place centers this far from a border

    def __post_init__(self):
        unknown = set(self.clutter) - set(CLUTTER_TYPES)
        if unknown:
            raise ValueError(f"unknown clutter types {sorted(unknown)}")
        if self.n_animals is None and self.density_per_patch is None:
            raise ValueError("need n_animals or density_per_patch")
        if not 0.0 <= self.occlusion_budget < 1.0:
            raise ValueError("occlusion_budget must be in [0, 1)")


def _raster_ellipse(canvas: np.ndarray, cx: float, cy: float, a: float, b: float,
                    theta: float, color: np.ndarray) -> None:
    h, w = canvas.shape[:2]
    r = a + 1.0
    x0, x1 = max(0, int(np.floor(cx - r))), min(w - 1, int(np.ceil(cx + r)))
    y0, y1 = max(0, int(np.floor(cy - r))), min(h - 1, int(np.ceil(cy + r)))
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    canvas[y0:y1 + 1, x0:x1 + 1][mask] = color


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(150.0, 180.0)
    coarse = gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=max(2.0, min(h, w) / 12))
    coarse *= 12.0 / max(1e-9, coarse.std())
    fine = rng.normal(0.0, 3.0, (h, w))
    lum = base + coarse + fine
    tint = rng.uniform(-6.0, 6.0, 3)
    return np.clip(lum[..., None] + tint[None, None, :], 0, 255)


def _add_clutter(canvas: np.ndarray, rng: np.random.Generator, kinds: Iterable[str],
                 intensity: float) -> None:
    h, w = canvas.shape[:2]
    area_scale = (h * w) / (64.0 * 64.0)
    for kind in kinds:
        n = rng.poisson(2.0 * intensity * area_scale) if intensity > 0 else 0
        for _ in range(n):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            if kind == "rocks":
                radius = rng.uniform(1.0, 4.0)
                tone = canvas[int(cy) % h, int(cx) % w].mean() - rng.uniform(30, 30 + 100 * intensity)
                _raster_ellipse(canvas, cx, cy, radius, radius * rng.uniform(0.7, 1.0),
                                rng.uniform(0, np.pi), np.clip(np.full(3, tone), 0, 255))
            elif kind == "logs":
                length = rng.uniform(10.0, 28.0)
                tone = canvas[int(cy) % h, int(cx) % w].mean() - rng.uniform(40, 40 + 80 * intensity)
                _raster_ellipse(canvas, cx, cy, length / 2, rng.uniform(0.8, 1.6),
                                rng.uniform(0, np.pi), np.clip(np.full(3, tone), 0, 255))
            elif kind == "snow":
                radius = rng.uniform(8.0, 24.0)
                _raster_ellipse(canvas, cx, cy, radius, radius * rng.uniform(0.6, 1.0),
                                rng.uniform(0, np.pi),
                                np.clip(canvas[int(cy) % h, int(cx) % w] + 55, 0, 255))
            elif kind == "water_texture":
                bw, bh = int(rng.uniform(16, 40 * intensity + 17)), int(rng.uniform(16, 40))
                x0, y0 = int(cx) % w, int(cy) % h
                region = canvas[y0:y0 + bh, x0:x0 + bw]
                if region.size:
                    yy, xx = np.mgrid[:region.shape[0], :region.shape[1]]
                    phase = rng.uniform(0, 2 * np.pi)
                    wave = 8.0 * np.sin(xx / rng.uniform(2, 5) + yy / rng.uniform(3, 8) + phase)
                    region += wave[..., None]
            elif kind == "shadow":
                radius = rng.uniform(5.0, 14.0)
                yy, xx = np.mgrid[:h, :w]
                d2 = (xx - cx) ** 2 + (yy - cy) ** 2
                canvas -= (28.0 * intensity * np.exp(-d2 / (2 * radius ** 2)))[..., None]
    np.clip(canvas, 0, 255, out=canvas)


def _sample_positions(rng: np.random.Generator, cfg: SceneConfig, sizes: np.ndarray,
                      ) -> np.ndarray:
    """Rejection-sample animal centers honoring the pairwise occlusion budget.
    A 2 px guard on top of the body half-lengths keeps zero-budget bodies from
    touching, so a connected-components oracle sees one blob per animal."""
    n = len(sizes)
    lo_x = hi_x = lo_y = hi_y = None
    m = cfg.placement_margin
    lo_x, hi_x = m, cfg.width - m
    lo_y, hi_y = m, cfg.height - m
    if cfg.nodata_margin > 0:
        lo_x = max(lo_x, cfg.nodata_margin + m)
        hi_y = min(hi_y, cfg.height - cfg.nodata_margin - m)
    if hi_x <= lo_x or hi_y <= lo_y:
        raise PlacementError("placement region is empty for this scene size")
    placed: list[tuple[float, float]] = []
    for i in range(n):
        ok = False
        for _ in range(400):
            if cfg.edge_band is not None:
                lo, hi = cfg.edge_band
                side = rng.integers(4)
                along = rng.uniform(0, cfg.width if side < 2 else cfg.height)
                depth = rng.uniform(lo, hi)
                if side == 0:
                    x, y = along, depth
                elif side == 1:
                    x, y = along, cfg.height - depth
                elif side == 2:
                    x, y = depth, along
                else:
                    x, y = cfg.width - depth, along
                x = float(np.clip(x, 2, cfg.width - 2))
                y = float(np.clip(y, 2, cfg.height - 2))
            else:
                x, y = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
            min_sep_ok = True
            for j, (px, py) in enumerate(placed):
                need = (sizes[i, 0] / 2 + sizes[j, 0] / 2 + 2.0) * (1.0 - cfg.occlusion_budget)
                if cfg.min_separation is not None:
                    need = max(need, cfg.min_separation)
                if (x - px) ** 2 + (y - py) ** 2 < need ** 2:
                    min_sep_ok = False
                    break
            if min_sep_ok:
                placed.append((x, y))
                ok = True
                break
        if not ok:
            raise PlacementError(
                f"could not place animal {i + 1}/{n} within the occlusion budget")
    return np.array(placed, dtype=float).reshape(n, 2)


def generate_scene(cfg: SceneConfig, image_id: str = "scene",
                   ) -> tuple[np.ndarray, list[PointAnnotation], np.ndarray]:
    """Render one scene. Returns (uint8 RGB image, annotations, validity mask).

    Deterministic for a fixed config: the same seed yields a bitwise
    identical image.
    """
    rng = np.random.default_rng(cfg.seed)
    canvas = _background(rng, cfg.height, cfg.width)
    _add_clutter(canvas, rng, cfg.clutter, cfg.clutter_intensity)

    if cfg.n_animals is not None:
        n = cfg.n_animals
    else:
        rate = cfg.density_per_patch * (cfg.width * cfg.height) / (cfg.patch_size ** 2)
        n = int(rng.poisson(rate))

    lengths = rng.uniform(*cfg.length_range, size=n)
    widths = np.minimum(rng.uniform(*cfg.width_range, size=n), lengths - 1.0)
    sizes = np.column_stack([lengths, widths]) if n else np.zeros((0, 2))
    centers = _sample_positions(rng, cfg, sizes) if n else np.zeros((0, 2))

    bg_mean = float(canvas.mean())
    points: list[PointAnnotation] = []
    for i in range(n):
        cx, cy = centers[i]
        a, b = lengths[i] / 2.0, widths[i] / 2.0
        theta = rng.uniform(0, np.pi)
        body_tone = max(5.0, bg_mean - (40.0 + 110.0 * cfg.contrast) * rng.uniform(0.9, 1.1))
        body = np.clip(np.full(3, body_tone) + rng.uniform(-8, 8, 3), 0, 255)
        _raster_ellipse(canvas, cx, cy, a, b, theta, body)
        # darker head kept inside the body outline so the blob stays symmetric
        hx = cx + 0.45 * a * np.cos(theta)
        hy = cy + 0.45 * a * np.sin(theta)
        _raster_ellipse(canvas, hx, hy, 0.35 * a, 0.75 * b, theta,
                        np.clip(body - 18, 0, 255))
        points.append(PointAnnotation(image_id=image_id, x=float(cx), y=float(cy)))

    mask = np.ones((cfg.height, cfg.width), dtype=bool)
    if cfg.nodata_margin > 0:
        m = cfg.nodata_margin
        mask[:, :m] = False
        mask[-m:, :] = False
        canvas[~mask] = 0.0

    return canvas.astype(np.uint8), points, mask


@dataclass
class SceneRecord:
    scene_id: str
    image: np.ndarray
    points: list[PointAnnotation]
    mask: np.ndarray


@dataclass
class Benchmark:
    suite: str
    seed: int
    patch_size: int
    overlap_px: int
    scenes: list[SceneRecord] = field(default_factory=list)

    def all_points(self) -> list[PointAnnotation]:
        return [p for s in self.scenes for p in s.points]

    def manifest(self) -> dict:
        return {
            "suite": self.suite,
            "seed": self.seed,
            "patch_size": self.patch_size,
            "overlap_px": self.overlap_px,
            "scenes": [
                {"scene_id": s.scene_id, "file": f"scenes/{s.scene_id}.png",
                 "width": int(s.image.shape[1]), "height": int(s.image.shape[0]),
                 "n_points": len(s.points),
                 "mask_file": (f"masks/{s.scene_id}.png" if not s.mask.all() else None)}
                for s in self.scenes
            ],
        }


def _scene_seed(suite_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((suite_seed, index)).generate_state(1)[0])


def _build_separable(seed: int) -> Benchmark:
    bench = Benchmark(suite="separable", seed=seed, patch_size=64, overlap_px=16)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBEEF)))
    for i in range(200):
        n = 0 if i % 2 == 0 else int(rng.integers(1, 4))
        cfg = SceneConfig(width=64, height=64, n_animals=n, contrast=float(rng.uniform(0.85, 0.95)),
                          clutter=(), seed=_scene_seed(seed, i))
        sid = f"sep_{i:04d}"
        img, pts, mask = generate_scene(cfg, image_id=sid)
        bench.scenes.append(SceneRecord(sid, img, pts, mask))
    return bench


def _build_cluttered(seed: int) -> Benchmark:
    bench = Benchmark(suite="cluttered", seed=seed, patch_size=64, overlap_px=32)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1A7)))
    for i in range(120):
        n = 0 if i % 2 == 0 else int(rng.integers(1, 5))
        cfg = SceneConfig(width=96, height=96, n_animals=n,
                          contrast=float(rng.uniform(0.5, 0.7)),
                          clutter=CLUTTER_TYPES, clutter_intensity=0.6,
                          seed=_scene_seed(seed, i))
        sid = f"clt_{i:04d}"
        img, pts, mask = generate_scene(cfg, image_id=sid)
        bench.scenes.append(SceneRecord(sid, img, pts, mask))
    return bench


def _build_dense(seed: int) -> Benchmark:
    bench = Benchmark(suite="dense", seed=seed, patch_size=512, overlap_px=78)
    counts = [2, 5, 10, 20, 40, 60, 90, 120, 160, 200, 230, 250]
    for i, n in enumerate(counts):
        cfg = SceneConfig(width=512, height=512, n_animals=n, contrast=0.8,
                          clutter=("rocks", "shadow"), clutter_intensity=0.25,
                          occlusion_budget=0.35, nodata_margin=24 if i < 2 else 0,
                          seed=_scene_seed(seed, i))
        sid = f"dns_{i:04d}"
        img, pts, mask = generate_scene(cfg, image_id=sid)
        bench.scenes.append(SceneRecord(sid, img, pts, mask))
    return bench


def _build_sparse_edge(seed: int) -> Benchmark:
    bench = Benchmark(suite="sparse_edge", seed=seed, patch_size=64, overlap_px=16)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xED6E)))
    for i in range(80):
        n = int(rng.integers(1, 3))
        cfg = SceneConfig(width=64, height=64, n_animals=n, contrast=0.7,
                          clutter=("rocks", "shadow"), clutter_intensity=0.3,
                          edge_band=(5.0, 10.0), seed=_scene_seed(seed, i))
        sid = f"edg_{i:04d}"
        img, pts, mask = generate_scene(cfg, image_id=sid)
        bench.scenes.append(SceneRecord(sid, img, pts, mask))
    return bench


_SUITE_BUILDERS = {
    "separable": _build_separable,
    "cluttered": _build_cluttered,
    "dense": _build_dense,
    "sparse_edge": _build_sparse_edge,
}


def generate_benchmark(suite: str, seed: int) -> Benchmark:
    """Build one of the fixed desk-scale suites fully in memory."""
    try:
        builder = _SUITE_BUILDERS[suite]
    except KeyError:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(_SUITE_BUILDERS)}")
    return builder(seed)


def write_benchmark(bench: Benchmark, out_dir: str | Path) -> Path:
    """Write scenes as lossless PNGs plus the annotation CSV and manifest."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    points = []
    for scene in bench.scenes:
        Image.fromarray(scene.image).save(out / "scenes" / f"{scene.scene_id}.png")
        if not scene.mask.all():
            (out / "masks").mkdir(exist_ok=True)
            Image.fromarray(scene.mask.astype(np.uint8) * 255).save(
                out / "masks" / f"{scene.scene_id}.png")
        points.extend(scene.points)
    write_annotations(out / "annotations.csv", points)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(bench.manifest(), fh, indent=2)
    return out


def load_benchmark(path: str | Path) -> Benchmark:
    root = Path(path)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    by_image: dict[str, list[PointAnnotation]] = {}
    for pt in read_annotations(root / "annotations.csv"):
        by_image.setdefault(pt.image_id, []).append(pt)
    bench = Benchmark(suite=manifest["suite"], seed=manifest["seed"],
                      patch_size=manifest["patch_size"], overlap_px=manifest["overlap_px"])
    for entry in manifest["scenes"]:
        img = np.asarray(Image.open(root / entry["file"]))
        if entry.get("mask_file"):
            mask = np.asarray(Image.open(root / entry["mask_file"])) > 0
        else:
            mask = np.ones(img.shape[:2], dtype=bool)
        bench.scenes.append(SceneRecord(entry["scene_id"], img,
                                        by_image.get(entry["scene_id"], []), mask))
    return bench
