"""Tests for anchor assignment, the box codec, and loss terms."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assign_bruteforce
from temdet.boxes import BBox, generate_anchors
from temdet.losses import (
    AnchorTargets,
    TrainingDiverged,
    assign_anchors,
    center_loss,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    focal_loss,
    regression_loss,
    segmentation_loss,
    total_loss,
)


def random_boxes(rng, n, lo=0.0, hi=200.0, min_size=1.0, max_size=80.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(min_size, max_size, size=(n, 2))
    return np.hstack([xy, xy + wh])


class TestAssignAnchors:
    def test_identical_anchor_positive(self):
        anchors = np.array([[10.0, 10.0, 40.0, 40.0]])
        t = assign_anchors(anchors, BBox(10, 10, 40, 40))
        assert t.labels.tolist() == [1]
        assert np.allclose(t.reg_targets[0], 0.0)

    def test_threshold_boundaries(self):
        gt = BBox(0, 0, 10, 10)
        anchors = np.array(
            [
                [0.0, 0.0, 10.0, 20.0],  # IoU 0.5 -> positive
                [0.0, 0.0, 10.0, 25.0],  # IoU 0.4 -> ignore
                [0.0, 0.0, 10.0, 22.0],  # IoU 100/220 = 0.4545 -> ignore
                [0.0, 0.0, 10.0, 40.0],  # IoU 0.25 -> negative
            ]
        )
        t = assign_anchors(anchors, gt)
        assert t.labels.tolist() == [1, -1, -1, 0]

    def test_agrees_with_bruteforce(self):
        rng = np.random.default_rng(0)
        anchors = random_boxes(rng, 1000)
        gt_arr = random_boxes(rng, 1, lo=40.0, hi=120.0, min_size=20.0)[0]
        gt = BBox.from_array(gt_arr)
        t = assign_anchors(anchors, gt)
        expected = assign_bruteforce(anchors, gt_arr)
        assert t.labels.tolist() == expected

    def test_grid_anchors_have_positives_for_matching_box(self):
        anchors = generate_anchors(8, 10, 16).anchors
        t = assign_anchors(anchors, BBox(40, 40, 100, 100))
        assert t.n_positive > 0
        pos_targets = t.reg_targets[t.labels == 1]
        assert np.all(np.isfinite(pos_targets))

    def test_empty_anchor_set_rejected(self):
        with pytest.raises(ValueError):
            assign_anchors(np.zeros((0, 4)), BBox(0, 0, 1, 1))

    def test_mismatched_targets_rejected(self):
        with pytest.raises(ValueError):
            AnchorTargets(labels=np.zeros(3, dtype=np.int8),
                          reg_targets=np.zeros((2, 4)))


class TestBoxCodec:
    def test_identity(self):
        a = BBox(10, 20, 40, 60)
        assert np.allclose(encode_box(a, a), 0.0)

    def test_worked_example(self):
        anchor = BBox(-7, -7, 23, 23)  # center (8, 8), 30x30
        gt = BBox(-19, -7, 41, 23)  # center (11, 8), 60x30
        t = encode_box(anchor, gt)
        assert np.allclose(t, [0.1, 0.0, math.log(2.0), 0.0], atol=1e-12)

    def test_decode_inverts_encode(self):
        rng = np.random.default_rng(1)
        anchors = random_boxes(rng, 500)
        gts = random_boxes(rng, 500)
        for arr in gts[:50]:
            gt = BBox.from_array(arr)
            t = encode_boxes(anchors, gt)
            back = decode_boxes(anchors, t)
            assert np.abs(back - arr[None, :]).max() < 1e-6

    def test_scalar_roundtrip(self):
        anchor = BBox(5, 5, 30, 50)
        gt = BBox(12, 3, 44, 61)
        back = decode_box(anchor, encode_box(anchor, gt))
        assert np.abs(back.as_array() - gt.as_array()).max() < 1e-9

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        anchor = random_boxes(rng, 1)[0]
        gt = random_boxes(rng, 1)[0]
        t = encode_boxes(anchor[None], BBox.from_array(gt))
        back = decode_boxes(anchor[None], t)[0]
        assert np.abs(back - gt).max() < 1e-6

    def test_degenerate_anchor_rejected(self):
        with pytest.raises(ValueError):
            encode_boxes(np.array([[0.0, 0.0, 0.0, 10.0]]), BBox(0, 0, 1, 1))


class TestFocalLoss:
    def test_closed_form_single_positive(self):
        loss = focal_loss(torch.zeros(1, dtype=torch.float64),
                          torch.ones(1, dtype=torch.float64))
        expected = 0.25 * 0.25 * math.log(2.0)
        assert abs(loss.item() - expected) < 1e-9

    def test_gamma_zero_is_scaled_cross_entropy(self):
        rng = np.random.default_rng(2)
        logits = torch.tensor(rng.normal(size=64))
        labels = torch.tensor((rng.uniform(size=64) < 0.3).astype(np.float64))
        loss = focal_loss(logits, labels, gamma=0.0, alpha=0.5)
        ce = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, labels, reduction="sum"
        )
        expected = 0.5 * ce / max(1.0, labels.sum().item())
        assert abs(loss.item() - expected.item()) < 1e-9

    def test_confident_predictions_vanish(self):
        logits = torch.tensor([30.0, -30.0, -30.0])
        labels = torch.tensor([1.0, 0.0, 0.0])
        assert focal_loss(logits, labels).item() < 1e-9

    def test_monotone_in_pt(self):
        values = [
            focal_loss(torch.tensor([x]), torch.ones(1)).item()
            for x in np.linspace(-3, 3, 13)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = torch.tensor(rng.normal(scale=3.0, size=32))
            labels = torch.tensor((rng.uniform(size=32) < 0.5).astype(np.float64))
            assert focal_loss(logits, labels).item() >= 0.0

    def test_all_negative_normalizes_by_one(self):
        logits = torch.zeros(4, dtype=torch.float64)
        labels = torch.zeros(4, dtype=torch.float64)
        loss = focal_loss(logits, labels)
        per = 0.75 * 0.25 * math.log(2.0)
        assert abs(loss.item() - 4 * per) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(torch.zeros(3), torch.zeros(4))


class TestComponentLosses:
    def test_segmentation_bce_at_zero_logits(self):
        logits = torch.zeros(1, 1, 4, 4)
        target = torch.ones(1, 1, 4, 4)
        assert abs(segmentation_loss(logits, target).item() - math.log(2.0)) < 1e-7

    def test_center_l1(self):
        pred = torch.tensor([[0.0, 1.0], [2.0, 3.0]])
        target = torch.tensor([[1.0, 1.0], [0.0, 3.0]])
        assert abs(center_loss(pred, target).item() - 0.75) < 1e-9

    def test_regression_smooth_l1_regions(self):
        pred = torch.tensor([[0.5, 0.0, 0.0, 0.0]])
        target = torch.zeros(1, 4)
        assert abs(regression_loss(pred, target).item() - 0.5 * 0.25) < 1e-9
        pred = torch.tensor([[3.0, 0.0, 0.0, 0.0]])
        assert abs(regression_loss(pred, target).item() - 2.5) < 1e-9

    def test_regression_averages_over_anchors(self):
        pred = torch.tensor([[3.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
        target = torch.zeros(2, 4)
        assert abs(regression_loss(pred, target).item() - 2.5) < 1e-9

    def test_regression_empty_is_zero(self):
        loss = regression_loss(torch.zeros(0, 4), torch.zeros(0, 4))
        assert loss.item() == 0.0


class TestTotalLoss:
    def test_worked_example(self):
        value = total_loss(0.1, 0.2, 0.3, 0.4)
        assert abs(value - 6.7) < 1e-12

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0) == 0.0

    def test_zero_lambdas(self):
        assert abs(total_loss(5.0, 9.0, 0.3, 0.4, 0.0, 0.0) - 0.7) < 1e-12

    def test_gradient_equals_weight(self):
        parts = [torch.tensor(v, requires_grad=True) for v in (0.1, 0.2, 0.3, 0.4)]
        total_loss(*parts).backward()
        grads = [p.grad.item() for p in parts]
        assert grads == [20.0, 20.0, 1.0, 1.0]

    def test_nonfinite_component_named(self):
        with pytest.raises(TrainingDiverged, match="center"):
            total_loss(0.1, float("nan"), 0.3, 0.4)
        with pytest.raises(TrainingDiverged, match="reg"):
            total_loss(0.1, 0.2, 0.3, float("inf"))
