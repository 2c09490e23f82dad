import numpy as np
import pytest

from oodseg import errors
from oodseg.aggregate import combine_scales, uniform_weights
from oodseg.fusion import entropy_map, fuse, road_uncertainty
from oodseg.metrics import ScoredPixels, auprc, collect_scored_pixels, fpr_at_tpr
from oodseg.raster_io import LABEL_IGNORE, LABEL_IN_DIST, LABEL_OOD
from oodseg.synth import (
    DetectionBand,
    DetectionProfile,
    SceneConfig,
    SceneObject,
    generate_dataset,
    generate_scene,
    mixed_size_benchmark_config,
    scene_from_objects,
    simulate_confidence,
    simulate_probs,
)
from oodseg.tiling import make_scheme, make_uniform_grid

from oracles import flood_fill_components


class TestGenerateScene:
    def test_seed_determinism(self):
        cfg = SceneConfig(seed=123)
        a = generate_scene(cfg)
        b = generate_scene(cfg)
        assert np.array_equal(a.gt, b.gt)
        assert np.array_equal(a.object_map, b.object_map)
        assert a.objects == b.objects
        assert np.array_equal(
            a.probs.values.view(np.uint32), b.probs.values.view(np.uint32)
        )

    def test_different_seeds_differ(self):
        a = generate_scene(SceneConfig(seed=1))
        b = generate_scene(SceneConfig(seed=2))
        assert not np.array_equal(a.gt, b.gt)

    def test_zero_objects(self):
        scene = generate_scene(SceneConfig(seed=5, n_objects=0))
        assert (scene.gt == LABEL_IN_DIST).all()

    def test_component_count_matches_objects(self):
        for seed in range(8):
            cfg = SceneConfig(seed=seed, n_objects=3)
            scene = generate_scene(cfg)
            components = flood_fill_components(scene.gt == LABEL_OOD, 8)
            assert len(components) == 3

    def test_ood_pixels_match_object_geometry(self):
        scene = generate_scene(SceneConfig(seed=9, n_objects=4))
        assert np.array_equal(scene.gt == LABEL_OOD, scene.object_map > 0)
        assert sum(o.area for o in scene.objects) == int((scene.object_map > 0).sum())

    def test_ignore_border(self):
        cfg = SceneConfig(seed=3, ignore_border=4)
        scene = generate_scene(cfg)
        assert (scene.gt[:4, :] == LABEL_IGNORE).all()
        assert (scene.gt[:, -4:] == LABEL_IGNORE).all()
        # objects stay clear of the border
        assert (scene.gt[4:-4, 4:-4] != LABEL_IGNORE).sum() == (128 - 8) ** 2

    def test_placement_failure(self):
        cfg = SceneConfig(seed=0, height=24, width=24, n_objects=30, size_range=(6, 8))
        with pytest.raises(errors.PlacementFailure):
            generate_scene(cfg)

    def test_object_too_large_for_image(self):
        cfg = SceneConfig(seed=0, height=16, width=16, n_objects=1, size_range=(20, 20))
        with pytest.raises(errors.PlacementFailure):
            generate_scene(cfg)


class TestSceneFromObjects:
    def test_explicit_geometry(self):
        cfg = SceneConfig(seed=0, height=32, width=32, n_objects=1)
        obj = SceneObject("rect", 4, 8, 6, 5, area=0)
        scene = scene_from_objects([obj], cfg)
        assert scene.objects[0].area == 30
        assert (scene.gt[8:13, 4:10] == LABEL_OOD).all()
        assert int((scene.gt == LABEL_OOD).sum()) == 30

    def test_ellipse_area_smaller_than_bbox(self):
        cfg = SceneConfig(seed=0, height=32, width=32, n_objects=1)
        scene = scene_from_objects([SceneObject("ellipse", 4, 4, 10, 8, area=0)], cfg)
        assert 0 < scene.objects[0].area < 80

    def test_overlap_rejected(self):
        cfg = SceneConfig(seed=0, height=32, width=32, n_objects=2)
        objs = [
            SceneObject("rect", 4, 4, 8, 8, area=0),
            SceneObject("rect", 8, 8, 8, 8, area=0),
        ]
        with pytest.raises(errors.PlacementFailure):
            scene_from_objects(objs, cfg)


class TestSimulateConfidence:
    def test_profile_levels_noise_free(self):
        # object exactly covering one fine patch: detected at the fine
        # scale, missed at the coarse scale
        cfg = SceneConfig(
            seed=0,
            height=128,
            width=128,
            n_objects=1,
            profile=DetectionProfile(
                default=DetectionBand(0.001, 1.0),
                per_grid={4: DetectionBand(0.5, 1.0), 256: DetectionBand(0.9, 1.0)},
            ),
        )
        scene = scene_from_objects([SceneObject("rect", 8, 8, 8, 8, area=0)], cfg)
        obj = scene.object_map > 0

        coarse = simulate_confidence(scene, make_uniform_grid(128, 128, 4), cfg)
        fine = simulate_confidence(scene, make_uniform_grid(128, 128, 256), cfg)
        assert (coarse[obj] == np.float32(0.5)).all()
        assert (coarse[~obj] == np.float32(0.1)).all()
        assert (fine[obj] == np.float32(0.9)).all()
        assert (fine[~obj] == np.float32(0.1)).all()

    def test_in_band_object_detected(self):
        cfg = SceneConfig(seed=0, height=64, width=64, n_objects=1)
        scene = scene_from_objects([SceneObject("rect", 10, 10, 6, 6, area=0)], cfg)
        conf = simulate_confidence(scene, make_uniform_grid(64, 64, 1), cfg)
        obj = scene.object_map > 0
        assert (conf[obj] == np.float32(0.9)).all()
        assert (conf[~obj] == np.float32(0.1)).all()

    def test_uniform_aggregation_separates(self):
        cfg = SceneConfig(
            seed=0,
            height=128,
            width=128,
            n_objects=1,
            profile=DetectionProfile(
                default=DetectionBand(0.001, 1.0),
                per_grid={4: DetectionBand(0.5, 1.0), 256: DetectionBand(0.9, 1.0)},
            ),
        )
        scene = scene_from_objects([SceneObject("rect", 8, 8, 8, 8, area=0)], cfg)
        maps = [
            simulate_confidence(scene, make_uniform_grid(128, 128, n), cfg)
            for n in (4, 256)
        ]
        combined = combine_scales(maps, uniform_weights(2))
        obj = scene.object_map > 0
        np.testing.assert_allclose(combined[obj], 0.7, atol=1e-7)
        np.testing.assert_allclose(combined[~obj], 0.1, atol=1e-7)
        sp = collect_scored_pixels(combined, scene.gt)
        assert auprc(sp) == 1.0

    def test_noise_deterministic_and_clamped(self):
        cfg = SceneConfig(seed=11, noise_sigma=0.3)
        scene = generate_scene(cfg)
        grid = make_uniform_grid(128, 128, 16)
        a = simulate_confidence(scene, grid, cfg)
        b = simulate_confidence(scene, grid, cfg)
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_noise_streams_differ_per_scale(self):
        cfg = SceneConfig(seed=11, n_objects=0, noise_sigma=0.1)
        scene = generate_scene(cfg)
        a = simulate_confidence(scene, make_uniform_grid(128, 128, 16), cfg)
        b = simulate_confidence(scene, make_uniform_grid(128, 128, 64), cfg)
        assert not np.array_equal(a, b)

    def test_scheme_tiles_accepted(self):
        cfg = SceneConfig(seed=2)
        scene = generate_scene(cfg)
        conf = simulate_confidence(scene, make_scheme("B", 128, 128), cfg)
        assert set(np.unique(conf)).issubset(
            {np.float32(0.1), np.float32(0.5), np.float32(0.9)}
        )

    def test_dimension_mismatch(self):
        cfg = SceneConfig(seed=2)
        scene = generate_scene(cfg)
        with pytest.raises(errors.DimensionMismatch):
            simulate_confidence(scene, make_uniform_grid(64, 64, 4), cfg)


class TestSimulateProbs:
    def test_ood_entropy_is_one(self):
        cfg = SceneConfig(seed=4)
        scene = generate_scene(cfg)
        entropy = entropy_map(simulate_probs(scene, cfg))
        ood = scene.gt == LABEL_OOD
        np.testing.assert_allclose(entropy[ood], 1.0, atol=1e-6)

    def test_background_road_uncertainty(self):
        cfg = SceneConfig(seed=4)
        scene = generate_scene(cfg)
        r = road_uncertainty(simulate_probs(scene, cfg), cfg.road_class_index)
        background = scene.gt == LABEL_IN_DIST
        np.testing.assert_allclose(r[background], 0.1, atol=1e-6)

    def test_fused_separation_noise_free(self):
        cfg = SceneConfig(seed=4)
        scene = generate_scene(cfg)
        conf = simulate_confidence(scene, make_uniform_grid(128, 128, 16), cfg)
        fused = fuse(conf, entropy_map(simulate_probs(scene, cfg)))
        ood = scene.gt == LABEL_OOD
        assert fused[ood].min() > fused[~ood].max()


class TestEndToEnd:
    def test_full_chain_tiling_aggregation_fusion_metrics(self):
        # the literal pipeline: slice/reassemble per scale via the model
        # adapter, combine, multiply with the entropy heatmap, then score
        from oodseg.aggregate import run_schedule, uniform_grid_schedule
        from oodseg.synth import SimulatedModel

        cfg = SceneConfig(seed=7)
        scores, labels = [], []
        for scene in generate_dataset(cfg, 4):
            model = SimulatedModel(scene, cfg)
            combined = run_schedule(
                scene.gt, uniform_grid_schedule([16, 64]), model
            )
            fused = fuse(combined, entropy_map(simulate_probs(scene, cfg)))
            sp = collect_scored_pixels(fused, scene.gt)
            scores.append(sp.scores)
            labels.append(sp.labels)
        pooled = ScoredPixels(np.concatenate(scores), np.concatenate(labels))
        assert auprc(pooled) == 1.0
        assert fpr_at_tpr(pooled) == 0.0

    def test_noise_free_dataset_is_perfect(self):
        cfg = SceneConfig(seed=7)
        scenes = generate_dataset(cfg, 10)
        scores = []
        labels = []
        for scene in scenes:
            maps = [
                simulate_confidence(scene, make_uniform_grid(128, 128, n), cfg)
                for n in (16, 64)
            ]
            combined = combine_scales(maps, uniform_weights(2))
            sp = collect_scored_pixels(combined, scene.gt)
            scores.append(sp.scores)
            labels.append(sp.labels)
        pooled = ScoredPixels(np.concatenate(scores), np.concatenate(labels))
        assert auprc(pooled) == 1.0
        assert fpr_at_tpr(pooled) == 0.0

    def test_shipped_benchmark_json_matches_library_config(self):
        import json
        from pathlib import Path

        path = Path(__file__).resolve().parent.parent / "configs" / "mixed_size_benchmark.json"
        loaded = SceneConfig.from_json_dict(json.loads(path.read_text()))
        assert loaded == mixed_size_benchmark_config(seed=7)

    def test_multi_scale_superiority(self):
        cfg = mixed_size_benchmark_config(seed=7)
        scenes = generate_dataset(cfg, 6)
        per_scale = {16: [], 256: []}
        combos = []
        for scene in scenes:
            maps = []
            for n in (16, 256):
                m = simulate_confidence(scene, make_uniform_grid(128, 128, n), cfg)
                per_scale[n].append((m, scene.gt))
                maps.append(m)
            combos.append((combine_scales(maps, uniform_weights(2)), scene.gt))

        def pooled_auprc(pairs):
            sps = [collect_scored_pixels(s, g) for s, g in pairs]
            return auprc(
                ScoredPixels(
                    np.concatenate([x.scores for x in sps]),
                    np.concatenate([x.labels for x in sps]),
                )
            )

        single = {n: pooled_auprc(per_scale[n]) for n in (16, 256)}
        combined = pooled_auprc(combos)
        assert combined > single[16]
        assert combined > single[256]
