"""Synthetic benchmark: rendering, splits, episodic sampling, shot pools."""

import numpy as np
import pytest

from fewdet.config import ConfigurationError
from fewdet.episodes import (
    QUERY_SIZE,
    SUPPORT_SIZE,
    EpisodeSampler,
    _box_int_mask,
    build_shot_pool,
    export_dataset,
    make_split,
    pool_digest,
    read_ppm,
    support_pairs_from_pool,
    evaluation_stream,
    write_ppm,
)
from fewdet.shapes import NUM_SHAPE_CLASSES, PlacedShape, place_shapes, render_image, shape_mask


@pytest.fixture
def rng():
    return np.random.default_rng(77)


class TestRendering:
    def test_centered_circle_box(self):
        placed = PlacedShape(class_id=0, cx=48.0, cy=48.0, size=10.0, appearance_seed=1)
        _, boxes = render_image([placed], 96, seed=0)
        (box,) = boxes
        assert (box.x1, box.y1, box.x2, box.y2) == (38.0, 38.0, 58.0, 58.0)
        assert box.x2 - box.x1 == 20.0 and box.y2 - box.y1 == 20.0

    def test_zero_shapes_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            render_image([], 96, seed=0)

    def test_deterministic_given_seed(self):
        placed = [PlacedShape(3, 30.0, 40.0, 12.0, appearance_seed=9)]
        a, _ = render_image(placed, 64, seed=5)
        b, _ = render_image(placed, 64, seed=5)
        assert (a == b).all()

    def test_twelve_distinct_silhouettes(self):
        masks = []
        for cid in range(NUM_SHAPE_CLASSES):
            masks.append(shape_mask(PlacedShape(cid, 24.0, 24.0, 14.0), 48))
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                assert (masks[i] != masks[j]).any(), (i, j)

    def test_same_instance_same_appearance_anywhere(self):
        # appearance is center-relative, so a moved instance looks the same
        a = PlacedShape(0, 20.0, 20.0, 8.0, appearance_seed=123)
        b = PlacedShape(0, 40.0, 36.0, 8.0, appearance_seed=123)
        img, _ = render_image([a, b], 64, seed=1)
        ma = shape_mask(a, 64)
        mb = shape_mask(b, 64)
        pa = img[:, ma]
        pb = img[:, mb]
        # identical pixel multisets up to ordering by scanline within the mask
        np.testing.assert_allclose(np.sort(pa.ravel()), np.sort(pb.ravel()), atol=1e-12)

    def test_placement_respects_occlusion_budget(self, rng):
        for _ in range(20):
            placements = place_shapes(rng, [0, 1, 2], 96, occlude=False)
            boxes = [(p.cx - p.size, p.cy - p.size, p.cx + p.size, p.cy + p.size) for p in placements]
            for i in range(3):
                for j in range(i + 1, 3):
                    from fewdet.shapes import _box_overlap_frac

                    assert _box_overlap_frac(np.array(boxes[i]), np.array(boxes[j])) <= 0.02


class TestSplits:
    def test_three_rotating_splits(self):
        for sid in range(3):
            split = make_split(sid)
            assert len(split.base_classes) == 8
            assert len(split.novel_classes) == 4
            assert not set(split.base_classes) & set(split.novel_classes)
            assert set(split.base_classes) | set(split.novel_classes) == set(range(12))
        assert make_split(0).novel_classes != make_split(1).novel_classes

    def test_invalid_split_id(self):
        with pytest.raises(ConfigurationError):
            make_split(5)


class TestMetaTrainSampling:
    def test_episode_structure(self):
        split = make_split(0)
        ep = EpisodeSampler(split, "meta_train", seed=0).sample()
        assert ep.query_image.shape == (3, QUERY_SIZE, QUERY_SIZE)
        assert 1 <= len(ep.gt_boxes) <= 3
        assert len(ep.supports) == len(split.base_classes)
        assert [s.class_id for s in ep.supports] == sorted(split.base_classes)
        for s in ep.supports:
            assert s.image.shape == (3, SUPPORT_SIZE, SUPPORT_SIZE)
            assert s.mask.shape == (1, SUPPORT_SIZE, SUPPORT_SIZE)

    def test_no_novel_leakage_over_1000_episodes(self):
        split = make_split(1)
        sampler = EpisodeSampler(split, "meta_train", seed=123)
        novel = set(split.novel_classes)
        for _ in range(1000):
            ep = sampler.sample()
            assert not {b.class_id for b in ep.gt_boxes} & novel
            assert not {s.class_id for s in ep.supports} & novel
            for s in ep.supports:
                assert not {b.class_id for b in s.gt_boxes} & novel

    def test_mask_is_union_of_class_boxes(self):
        split = make_split(0)
        sampler = EpisodeSampler(split, "meta_train", seed=3)
        for _ in range(20):
            ep = sampler.sample()
            for s in ep.supports:
                expected = np.zeros((SUPPORT_SIZE, SUPPORT_SIZE), dtype=bool)
                for b in s.gt_boxes:
                    if b.class_id == s.class_id:
                        expected |= _box_int_mask(b, SUPPORT_SIZE)
                np.testing.assert_array_equal(s.mask[0].astype(bool), expected)

    def test_occlusion_occurs_sometimes(self):
        from fewdet.detector import iou_matrix

        sampler = EpisodeSampler(make_split(0), "meta_train", seed=8)
        overlapping = 0
        for _ in range(100):
            ep = sampler.sample()
            if len(ep.gt_boxes) < 2:
                continue
            boxes = np.array([b.as_array() for b in ep.gt_boxes])
            iou = iou_matrix(boxes, boxes)
            np.fill_diagonal(iou, 0)
            if iou.max() > 0.05:
                overlapping += 1
        assert overlapping >= 5


class TestShotPool:
    def test_pool_counts(self):
        split = make_split(0)
        budget = build_shot_pool(1234, split, 5)
        assert sum(len(v) for v in budget.instances.values()) == 5 * 12

    def test_pool_deterministic(self):
        split = make_split(0)
        a = build_shot_pool(1234, split, 3, run_index=2)
        b = build_shot_pool(1234, split, 3, run_index=2)
        assert pool_digest(a) == pool_digest(b)

    def test_distinct_runs_distinct_pools(self):
        split = make_split(0)
        digests = {pool_digest(build_shot_pool(1234, split, 5, run_index=r)) for r in range(10)}
        assert len(digests) == 10

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            build_shot_pool(1, make_split(0), 0)


class TestFineTuneSampling:
    def test_supports_cover_all_classes(self):
        split = make_split(0)
        budget = build_shot_pool(7, split, 2)
        ep = EpisodeSampler(split, "fine_tune", seed=1, budget=budget).sample()
        assert [s.class_id for s in ep.supports] == list(range(12))

    def test_k1_support_always_the_single_pooled_instance(self):
        split = make_split(0)
        budget = build_shot_pool(7, split, 1)
        sampler = EpisodeSampler(split, "fine_tune", seed=1, budget=budget)
        dims = {}
        colors = {}
        for _ in range(5):
            ep = sampler.sample()
            for s in ep.supports:
                target = [b for b in s.gt_boxes if b.class_id == s.class_id]
                assert len(target) == 1
                b = target[0]
                dims.setdefault(s.class_id, []).append((b.x2 - b.x1, b.y2 - b.y1))
                region = s.image[:, int(b.y1) : int(b.y2), int(b.x1) : int(b.x2)]
                colors.setdefault(s.class_id, []).append(region.reshape(3, -1).max(axis=1))
        for cid, wh in dims.items():
            # fixed silhouette: extent varies only by tip rasterization
            assert np.ptp(np.asarray(wh), axis=0).max() <= 5.0
            # fixed appearance: the brightest fill color is position-independent
            cols = np.asarray(colors[cid])
            assert np.ptp(cols, axis=0).max() <= 0.05, cid

    def test_query_objects_come_from_pool_classes(self):
        split = make_split(2)
        budget = build_shot_pool(99, split, 3)
        sampler = EpisodeSampler(split, "fine_tune", seed=4, budget=budget)
        sizes = {cid: {round(i.size, 6) for i in budget.instances[cid]} for cid in range(12)}
        for _ in range(30):
            ep = sampler.sample()
            for b in ep.gt_boxes:
                assert b.class_id in range(12)
                half = round((b.x2 - b.x1) / 2, 6)
                # tight box of the rendered silhouette never exceeds the
                # placed half extent
                assert half <= max(sizes[b.class_id]) + 1.0

    def test_fine_tune_requires_budget(self):
        with pytest.raises(ConfigurationError, match="ShotBudget"):
            EpisodeSampler(make_split(0), "fine_tune", seed=0)

    def test_support_pairs_from_pool_shapes(self):
        split = make_split(0)
        budget = build_shot_pool(7, split, 2)
        per_class = support_pairs_from_pool(budget, split, seed=5)
        assert [cid for cid, _ in per_class] == list(range(12))
        assert all(len(pairs) == 2 for _, pairs in per_class)


class TestStreamsAndExport:
    def test_stream_deterministic(self):
        split = make_split(0)
        a = list(evaluation_stream(split, 42, 6))
        b = list(evaluation_stream(split, 42, 6))
        for (ia, ga), (ib, gb) in zip(a, b):
            assert (ia == ib).all()
            assert len(ga) == len(gb)

    def test_stream_covers_all_classes(self):
        split = make_split(0)
        seen = set()
        for _, boxes in evaluation_stream(split, 42, 24):
            seen |= {b.class_id for b in boxes}
        assert seen == set(range(12))

    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.random((3, 10, 12))
        path = tmp_path / "img.ppm"
        write_ppm(str(path), img)
        back = read_ppm(str(path))
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_export_dataset(self, tmp_path):
        import csv

        out = tmp_path / "ds"
        n_ann = export_dataset(str(out), make_split(0), 42, 5)
        ppms = sorted(out.glob("*.ppm"))
        assert len(ppms) == 5
        with open(out / "annotations.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == n_ann
        assert set(rows[0]) == {"image_id", "class_id", "x1", "y1", "x2", "y2"}
