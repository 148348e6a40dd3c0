"""RoI Align, bilinear resize and multi-resolution fusion."""

import numpy as np
import pytest

from fewdet.oracles import roi_align_loop
from fewdet.roi import (
    BranchAttention,
    MultiScalePooler,
    RoIBox,
    RoiStatus,
    branch_weight,
    resize_bilinear,
    roi_align,
    roi_align_batch,
)
from fewdet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestRoIBox:
    def test_rejects_inverted_corners(self):
        with pytest.raises(ValueError, match="order"):
            RoIBox(5.0, 0.0, 1.0, 2.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            RoIBox(0.0, 0.0, np.inf, 1.0)


class TestRoiAlign:
    def test_constant_feature_all_bins_equal(self, rng):
        feat = Tensor(np.full((3, 9, 9), 4.25))
        out, status = roi_align(feat, RoIBox(1.3, 2.6, 7.1, 8.0), 4, spatial_scale=1.0)
        assert status == RoiStatus.OK
        np.testing.assert_allclose(out.data, 4.25, atol=1e-12)

    def test_single_cell_box_resolution_one(self, rng):
        feat = rng.standard_normal((2, 6, 6))
        # box covering exactly cell (2, 3): its center sample reads that value
        out, status = roi_align(Tensor(feat), RoIBox(2.5, 1.5, 3.5, 2.5), 1, 1.0, sampling_ratio=1)
        assert status == RoiStatus.OK
        np.testing.assert_allclose(out.data[:, 0, 0], feat[:, 2, 3], atol=1e-12)

    def test_matches_bilinear_oracle(self, rng):
        feat = rng.standard_normal((4, 10, 10))
        for _ in range(25):
            x1, y1 = rng.uniform(-1, 7, size=2)
            box = RoIBox(x1, y1, x1 + rng.uniform(0.5, 5), y1 + rng.uniform(0.5, 5))
            out, _ = roi_align(Tensor(feat), box, 4, spatial_scale=1.0)
            ref = roi_align_loop(feat, box, 4, 1.0)
            assert np.abs(out.data - ref).max() <= 1e-12

    def test_spatial_scale_maps_image_coords(self, rng):
        feat = rng.standard_normal((1, 8, 8))
        a, _ = roi_align(Tensor(feat), RoIBox(8.0, 8.0, 40.0, 40.0), 2, spatial_scale=0.125)
        b, _ = roi_align(Tensor(feat), RoIBox(1.0, 1.0, 5.0, 5.0), 2, spatial_scale=1.0)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_degenerate_box_single_sample(self, rng):
        feat = rng.standard_normal((2, 6, 6))
        out, status = roi_align(Tensor(feat), RoIBox(2.5, 3.5, 2.5, 3.5), 4, 1.0)
        assert status == RoiStatus.DEGENERATE
        ref = roi_align_loop(feat, RoIBox(2.5, 3.5, 2.5, 3.5), 4, 1.0)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)
        # all bins carry the single sampled value
        assert np.ptp(out.data.reshape(2, -1), axis=1).max() == 0.0

    def test_outside_box_zero_output(self, rng):
        feat = rng.standard_normal((2, 6, 6))
        out, status = roi_align(Tensor(feat), RoIBox(10.0, 10.0, 14.0, 12.0), 3, 1.0)
        assert status == RoiStatus.OUTSIDE
        assert np.all(out.data == 0)

    def test_translation_consistency(self, rng):
        base = rng.standard_normal((2, 12, 12))
        shifted = np.roll(base, shift=(2, 3), axis=(1, 2))
        box = RoIBox(2.2, 3.1, 6.7, 7.5)
        moved = RoIBox(box.x1 + 3, box.y1 + 2, box.x2 + 3, box.y2 + 2)
        a, _ = roi_align(Tensor(base), box, 4, 1.0)
        b, _ = roi_align(Tensor(shifted), moved, 4, 1.0)
        assert np.abs(a.data - b.data).max() <= 1e-9

    def test_batch_matches_single(self, rng):
        feat = rng.standard_normal((3, 9, 9))
        boxes = [RoIBox(0.5, 1.0, 4.0, 5.0), RoIBox(2.0, 2.0, 8.0, 8.5)]
        batch, statuses = roi_align_batch(Tensor(feat), boxes, 4, 1.0)
        for i, box in enumerate(boxes):
            single, st = roi_align(Tensor(feat), box, 4, 1.0)
            np.testing.assert_allclose(batch.data[i], single.data, atol=1e-12)
            assert st == statuses[i]

    def test_invalid_arguments(self, rng):
        feat = Tensor(rng.standard_normal((1, 4, 4)))
        with pytest.raises(ValueError, match="resolution"):
            roi_align(feat, RoIBox(0, 0, 2, 2), 0, 1.0)
        with pytest.raises(ValueError, match="spatial_scale"):
            roi_align(feat, RoIBox(0, 0, 2, 2), 2, 0.0)


class TestResizeBilinear:
    def test_identity_is_bit_exact(self, rng):
        m = Tensor(rng.standard_normal((3, 8, 8)))
        assert resize_bilinear(m, 8) is m

    def test_constant_stays_constant(self):
        out = resize_bilinear(Tensor(np.full((2, 4, 4), 1.5)), 8)
        np.testing.assert_allclose(out.data, 1.5, atol=1e-12)

    def test_two_by_two_center(self):
        m = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 2, 2))
        out = resize_bilinear(m, 3)
        assert abs(out.data[0, 1, 1] - 1.5) < 1e-12
        # corners are preserved under align-corners
        np.testing.assert_allclose(
            out.data[0][[0, 0, 2, 2], [0, 2, 0, 2]], [0.0, 1.0, 2.0, 3.0], atol=1e-12
        )


class TestBranchAttention:
    def test_zero_parameters_zero_logit(self, rng):
        branch = BranchAttention("b", 8, rng)
        for p in branch.parameters():
            p.tensor.data[:] = 0.0
        logit = branch_weight(Tensor(rng.standard_normal((8, 4, 4))), branch)
        assert logit.item() == 0.0

    def test_deterministic(self, rng):
        branch = BranchAttention("b", 8, rng)
        pooled = rng.standard_normal((8, 4, 4))
        a = branch_weight(Tensor(pooled), branch).item()
        b = branch_weight(Tensor(pooled.copy()), branch).item()
        assert a == b

    def test_hidden_width_is_quarter(self, rng):
        branch = BranchAttention("b", 64, rng)
        assert branch.fc1.weight.data.shape == (16, 64)
        assert branch.fc2.weight.data.shape == (1, 16)


class TestAggregate:
    def test_equal_logits_uniform_weights(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        for p in pooler.parameters():
            p.tensor.data[:] = 0.0
        pf = pooler.aggregate(Tensor(rng.standard_normal((8, 10, 10))), RoIBox(1, 1, 8, 8))
        np.testing.assert_allclose(pf.weights, 1.0 / 3, atol=1e-12)

    def test_constant_feature_constant_fusion(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        pf = pooler.aggregate(Tensor(np.full((8, 10, 10), 2.0)), RoIBox(1.4, 2.0, 8.3, 9.0))
        np.testing.assert_allclose(pf.fused.data, 2.0, atol=1e-8)

    def test_weights_positive_sum_to_one(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        feat = Tensor(rng.standard_normal((8, 12, 12)))
        boxes = []
        for _ in range(40):
            x1, x2 = np.sort(rng.uniform(0, 12, 2))
            y1, y2 = np.sort(rng.uniform(0, 12, 2))
            boxes.append(RoIBox(x1, y1, x2 + 0.5, y2 + 0.5))
        _, wts, _, _ = pooler.aggregate_batch(feat, boxes)
        assert (wts > 0).all()
        np.testing.assert_allclose(wts.sum(axis=1), 1.0, atol=1e-6)

    def test_saturated_weight_selects_branch(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        for p in pooler.parameters():
            p.tensor.data[:] = 0.0
        pooler.branches[1].fc2.bias.tensor.data[:] = 20.0  # resolution-8 branch
        feat = Tensor(rng.standard_normal((8, 10, 10)))
        box = RoIBox(1.0, 1.5, 8.2, 9.0)
        pf = pooler.aggregate(feat, box)
        direct, _ = roi_align(feat, box, 8, 1.0)
        assert np.abs(pf.fused.data - direct.data).max() <= 1e-8

    def test_plain_sum_mode(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        feat = Tensor(rng.standard_normal((8, 10, 10)))
        box = RoIBox(0.5, 0.5, 9.0, 9.0)
        pf = pooler.aggregate(feat, box, attention=False)
        total = sum(
            resize_bilinear(pb, 8).data for pb in pf.per_branch
        )
        np.testing.assert_allclose(pf.fused.data, total, atol=1e-10)

    def test_status_propagates(self, rng):
        pooler = MultiScalePooler("cfa", 8, rng)
        pf = pooler.aggregate(Tensor(rng.standard_normal((8, 6, 6))), RoIBox(50, 50, 60, 60))
        assert pf.status == RoiStatus.OUTSIDE
        assert np.all(pf.per_branch[0].data == 0)


def test_pooling_gradients_pass_finite_differences():
    from fewdet.gradcheck import gradcheck_all

    wanted = {"roi.roi_align", "roi.resize_bilinear", "roi.branch_weight", "roi.aggregate"}
    results = [r for r in gradcheck_all(seed=2) if r.name in wanted]
    assert {r.name for r in results} == wanted
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_err}"
