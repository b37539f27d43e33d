import numpy as np
import pytest
from scipy.stats import chisquare, poisson

from wildcount.errors import PlacementError
from wildcount.synth import (
    SceneConfig,
    generate_benchmark,
    generate_scene,
    load_benchmark,
    write_benchmark,
)

from oracles import blob_centers


class TestGenerateScene:
    def test_empty_scene(self):
        cfg = SceneConfig(width=96, height=96, n_animals=0,
                          clutter=("rocks", "logs"), clutter_intensity=0.5, seed=3)
        img, pts, mask = generate_scene(cfg)
        assert img.shape == (96, 96, 3) and img.dtype == np.uint8
        assert pts == []
        assert mask.all()

    def test_blob_oracle_recovers_animals(self):
        cfg = SceneConfig(width=128, height=128, n_animals=10, contrast=0.9,
                          clutter=(), seed=11)
        img, pts, _ = generate_scene(cfg)
        centers = blob_centers(img, dark_threshold=95.0)
        assert len(centers) == 10
        # every annotation has a recovered blob center nearby
        for p in pts:
            d = min((p.x - cx) ** 2 + (p.y - cy) ** 2 for cx, cy in centers)
            assert d ** 0.5 <= 1.0

    def test_annotation_fidelity_half_pixel(self):
        cfg = SceneConfig(width=128, height=128, n_animals=8, contrast=0.95,
                          clutter=(), seed=5)
        img, pts, _ = generate_scene(cfg)
        centers = blob_centers(img, dark_threshold=95.0)
        for p in pts:
            d = min(((p.x - cx) ** 2 + (p.y - cy) ** 2) ** 0.5 for cx, cy in centers)
            assert d <= 0.5

    def test_deterministic(self):
        cfg = SceneConfig(width=96, height=96, n_animals=5, clutter=("rocks",),
                          clutter_intensity=0.4, seed=21)
        a_img, a_pts, _ = generate_scene(cfg)
        b_img, b_pts, _ = generate_scene(cfg)
        assert np.array_equal(a_img, b_img)
        assert [(p.x, p.y) for p in a_pts] == [(p.x, p.y) for p in b_pts]

    def test_placement_error_when_overcrowded(self):
        cfg = SceneConfig(width=32, height=32, n_animals=40, seed=0)
        with pytest.raises(PlacementError):
            generate_scene(cfg)

    def test_nodata_margin(self):
        cfg = SceneConfig(width=96, height=96, n_animals=3, nodata_margin=12, seed=9)
        img, pts, mask = generate_scene(cfg)
        assert not mask[:, :12].any() and not mask[-12:, :].any()
        assert (img[:, :12] == 0).all()
        for p in pts:
            assert mask[int(p.y), int(p.x)]

    def test_density_mode_chi_square(self):
        # 1000 single-patch scenes at Poisson rate 1.5 per patch
        lam = 1.5
        counts = []
        for i in range(1000):
            cfg = SceneConfig(width=64, height=64, n_animals=None,
                              density_per_patch=lam, seed=100_000 + i)
            _, pts, _ = generate_scene(cfg)
            counts.append(len(pts))
        counts = np.array(counts)
        edges = [0, 1, 2, 3, 4]
        observed = [np.sum(counts == k) for k in edges[:-1]] + [np.sum(counts >= 4)]
        probs = [poisson.pmf(k, lam) for k in edges[:-1]] + [1 - poisson.cdf(3, lam)]
        expected = np.array(probs) * len(counts)
        stat, p = chisquare(observed, expected)
        assert p > 0.01

    def test_unknown_clutter_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(clutter=("bears",))


class TestBenchmarks:
    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            generate_benchmark("imaginary", seed=1)

    def test_separable_shape(self):
        bench = generate_benchmark("separable", seed=7)
        assert len(bench.scenes) == 200
        assert bench.patch_size == 64
        n_pos = sum(1 for s in bench.scenes if s.points)
        assert 80 <= n_pos <= 120

    def test_dense_has_high_density_patch(self):
        bench = generate_benchmark("dense", seed=7)
        assert max(len(s.points) for s in bench.scenes) >= 200

    def test_sparse_edge_construction(self):
        bench = generate_benchmark("sparse_edge", seed=7)
        for scene in bench.scenes:
            assert 1 <= len(scene.points) <= 2
            h, w = scene.image.shape[:2]
            for p in scene.points:
                border_dist = min(p.x, p.y, w - 1 - p.x, h - 1 - p.y)
                assert border_dist <= 10.0

    def test_regeneration_bitwise_identical(self):
        a = generate_benchmark("cluttered", seed=13)
        b = generate_benchmark("cluttered", seed=13)
        for sa, sb in zip(a.scenes, b.scenes):
            assert sa.scene_id == sb.scene_id
            assert np.array_equal(sa.image, sb.image)
            assert [(p.x, p.y) for p in sa.points] == [(p.x, p.y) for p in sb.points]

    def test_write_and_load_round_trip(self, tmp_path):
        bench = generate_benchmark("sparse_edge", seed=3)
        bench.scenes = bench.scenes[:6]
        write_benchmark(bench, tmp_path / "suite")
        back = load_benchmark(tmp_path / "suite")
        assert back.suite == "sparse_edge"
        assert back.patch_size == bench.patch_size
        for sa, sb in zip(bench.scenes, back.scenes):
            assert np.array_equal(sa.image, sb.image)
            assert [(p.x, p.y) for p in sa.points] == [(p.x, p.y) for p in sb.points]
            assert np.array_equal(sa.mask, sb.mask)

    def test_dense_mask_round_trip(self, tmp_path):
        bench = generate_benchmark("dense", seed=5)
        bench.scenes = bench.scenes[:2]
        write_benchmark(bench, tmp_path / "suite")
        back = load_benchmark(tmp_path / "suite")
        assert not back.scenes[0].mask.all()
        assert np.array_equal(bench.scenes[0].mask, back.scenes[0].mask)
