import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enum_giou, enum_iou, random_int_box
from scenevg.geometry import (
    Box, DegenerateBoxError, anchor_grid, area_bin, convert_box, cxcywh_to_xyxy, giou,
    grounding_loss, grounding_loss_tensor, iou, paired_giou, pairwise_iou, smooth_l1,
    xyxy_to_cxcywh,
)


@st.composite
def int_boxes(draw, size=64):
    x1 = draw(st.integers(0, size - 1))
    y1 = draw(st.integers(0, size - 1))
    x2 = draw(st.integers(x1 + 1, size))
    y2 = draw(st.integers(y1 + 1, size))
    return (x1, y1, x2, y2)


@st.composite
def real_boxes(draw):
    x1 = draw(st.floats(-100, 100))
    y1 = draw(st.floats(-100, 100))
    w = draw(st.floats(0.01, 100))
    h = draw(st.floats(0.01, 100))
    return (x1, y1, x1 + w, y1 + h)


class TestBox:
    @pytest.mark.parametrize("coords", [(0, 0, 0, 5), (3, 3, 1, 5), (0, 0, 5, -1)])
    def test_degenerate_rejected(self, coords):
        with pytest.raises(DegenerateBoxError):
            Box(*coords)

    def test_non_finite_rejected(self):
        with pytest.raises(DegenerateBoxError):
            Box(0, 0, math.inf, 1)

    def test_normalize_round_trip(self):
        b = Box(10, 20, 110, 220, image_size=(256, 256))
        n = b.normalized()
        assert all(0 <= v <= 1 for v in n.as_list())
        back = n.denormalized((256, 256))
        assert back.as_list() == pytest.approx(b.as_list(), abs=1e-12)

    def test_normalize_needs_image_size(self):
        with pytest.raises(ValueError):
            Box(0, 0, 1, 1).normalized()


class TestConvert:
    @pytest.mark.parametrize("corner,center", [
        ((0, 0, 10, 10), (5, 5, 10, 10)),
        ((2, 4, 6, 14), (4, 9, 4, 10)),
    ])
    def test_examples(self, corner, center):
        assert convert_box(corner, "corner") == center
        assert convert_box(center, "center") == corner

    def test_degenerate(self):
        with pytest.raises(DegenerateBoxError):
            convert_box((0, 0, 0, 3), "corner")
        with pytest.raises(DegenerateBoxError):
            convert_box((1, 1, -2, 3), "center")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            convert_box((0, 0, 1, 1), "polar")

    @given(real_boxes())
    def test_round_trip_preserves_area(self, b):
        cs = convert_box(b, "corner")
        back = convert_box(cs, "center")
        assert back == pytest.approx(b, abs=1e-9)
        assert cs[2] * cs[3] == pytest.approx(Box(*b).area, rel=1e-9)


class TestOverlap:
    def test_examples(self):
        assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
        assert giou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
        assert giou((0, 0, 1, 1), (2, 2, 3, 3)) == pytest.approx(-7 / 9, abs=1e-15)
        assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)
        assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(-0.0793650793650793, abs=1e-12)

    def test_degenerate_input_raises(self):
        with pytest.raises(DegenerateBoxError):
            iou((0, 0, 0, 1), (0, 0, 1, 1))
        with pytest.raises(DegenerateBoxError):
            giou((0, 0, 1, 1), (2, 2, 2, 3))

    def test_seeded_pairs_match_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a, b = random_int_box(rng), random_int_box(rng)
            assert abs(iou(a, b) - enum_iou(a, b)) < 1e-9
            assert abs(giou(a, b) - enum_giou(a, b)) < 1e-9

    @given(int_boxes(), int_boxes())
    @settings(max_examples=150)
    def test_enumeration_property(self, a, b):
        assert abs(iou(a, b) - enum_iou(a, b)) < 1e-9
        assert abs(giou(a, b) - enum_giou(a, b)) < 1e-9

    @given(real_boxes(), real_boxes())
    def test_symmetry_and_bounds(self, a, b):
        assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
        assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)
        assert 0.0 <= iou(a, b) <= 1.0
        assert -1.0 < giou(a, b) <= iou(a, b) + 1e-12

    @given(int_boxes(), int_boxes())
    def test_giou_equals_iou_iff_hull_is_union(self, a, b):
        ca = {(i, j) for i in range(a[0], a[2]) for j in range(a[1], a[3])}
        cb = {(i, j) for i in range(b[0], b[2]) for j in range(b[1], b[3])}
        hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
        assert (giou(a, b) == pytest.approx(iou(a, b), abs=1e-12)) == (hull == len(ca | cb))

    @given(real_boxes(), real_boxes(), st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10))
    def test_translation_and_scale_invariance(self, a, b, dx, dy, s):
        def move(box):
            return (box[0] * s + dx, box[1] * s + dy, box[2] * s + dx, box[3] * s + dy)

        assert iou(move(a), move(b)) == pytest.approx(iou(a, b), abs=1e-9)
        assert giou(move(a), move(b)) == pytest.approx(giou(a, b), abs=1e-9)


class TestLosses:
    def test_smooth_l1_values(self):
        assert smooth_l1([1, 2], [1, 2]) == 0.0
        assert smooth_l1([0.5], [0.0]) == pytest.approx(0.125)
        assert smooth_l1([2.0], [0.0]) == pytest.approx(1.5)
        # mean over elements
        assert smooth_l1([0.5, 2.0], [0.0, 0.0]) == pytest.approx((0.125 + 1.5) / 2)
        assert smooth_l1([0.5], [0.0], beta=0.25) == pytest.approx(0.5 - 0.125)

    def test_smooth_l1_errors(self):
        with pytest.raises(ValueError):
            smooth_l1([1, 2], [1])
        with pytest.raises(ValueError):
            smooth_l1([1], [1], beta=0)

    def test_grounding_loss_identity(self):
        b = (0.4, 0.4, 0.2, 0.3)
        assert grounding_loss(b, b) == 0.0

    def test_grounding_loss_composition(self):
        # corner (0,0,1,1) vs (2,2,3,3) scaled by 1/4 into the unit square
        pred = convert_box((0, 0, 0.25, 0.25), "corner")
        gt = convert_box((0.5, 0.5, 0.75, 0.75), "corner")
        expected = smooth_l1(pred, gt) + 1 - (-7 / 9)
        assert grounding_loss(pred, gt) == pytest.approx(expected, abs=1e-12)

    def test_grounding_loss_requires_normalized(self):
        with pytest.raises(ValueError):
            grounding_loss((5, 5, 2, 2), (0.5, 0.5, 0.2, 0.2))

    def test_monotone_along_translation(self):
        gt = (0.7, 0.6, 0.2, 0.25)
        start = (0.2, 0.3, 0.2, 0.25)
        losses = []
        for t in np.linspace(0, 1, 41):
            pred = (start[0] + t * (gt[0] - start[0]), start[1] + t * (gt[1] - start[1]), 0.2, 0.25)
            losses.append(grounding_loss(pred, gt))
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] == pytest.approx(0.0, abs=1e-12)

    @given(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.05, 0.2), st.floats(0.05, 0.2))
    def test_loss_zero_iff_equal(self, cx, cy, w, h):
        b = (cx, cy, w, h)
        assert grounding_loss(b, b) == 0.0
        assert grounding_loss((cx + 0.01, cy, w, h), b) > 0.0

    def test_tensor_loss_matches_scalar(self):
        rng = np.random.default_rng(3)
        pred = np.column_stack([rng.uniform(0.2, 0.8, (8, 2)), rng.uniform(0.05, 0.3, (8, 2))])
        gt = np.column_stack([rng.uniform(0.2, 0.8, (8, 2)), rng.uniform(0.05, 0.3, (8, 2))])
        got = grounding_loss_tensor(torch.tensor(pred), torch.tensor(gt))
        want = np.mean([grounding_loss(p, g) for p, g in zip(pred, gt)])
        assert float(got) == pytest.approx(want, abs=1e-12)

    def test_tensor_overlaps_match_scalar(self):
        rng = np.random.default_rng(4)
        a = [random_int_box(rng) for _ in range(6)]
        b = [random_int_box(rng) for _ in range(5)]
        pw = pairwise_iou(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64))
        for i in range(6):
            for j in range(5):
                assert float(pw[i, j]) == pytest.approx(iou(a[i], b[j]), abs=1e-12)
        pg = paired_giou(torch.tensor(a[:5], dtype=torch.float64), torch.tensor(b, dtype=torch.float64))
        for i in range(5):
            assert float(pg[i]) == pytest.approx(giou(a[i], b[i]), abs=1e-12)

    def test_tensor_conversions_inverse(self):
        x = torch.tensor([[0.0, 0.0, 10.0, 10.0], [2.0, 4.0, 6.0, 14.0]], dtype=torch.float64)
        c = xyxy_to_cxcywh(x)
        assert c.tolist() == [[5, 5, 10, 10], [4, 9, 4, 10]]
        assert torch.equal(cxcywh_to_xyxy(c), x)


class TestAreaBin:
    @pytest.mark.parametrize("side,expected", [(50, "small"), (100, "medium"), (200, "large")])
    def test_examples(self, side, expected):
        assert area_bin(Box(0, 0, side, side)) == expected

    @pytest.mark.parametrize("w,h,expected", [
        (4095, 1, "small"), (4096, 1, "medium"), (16383, 1, "medium"), (16384, 1, "large"),
    ])
    def test_boundaries(self, w, h, expected):
        assert area_bin(Box(0, 0, w, h)) == expected

    def test_degenerate(self):
        with pytest.raises(DegenerateBoxError):
            area_bin((0, 0, 0, 0))


def test_anchor_grid_layout():
    anchors = anchor_grid(256, 64, (1, 2))
    assert len(anchors) == 32
    assert anchors[0] == (0, 0, 64, 64)
    # scale-major: the 2x anchor of cell (0, 0) is clipped at the image border
    assert anchors[16] == (0, 0, 96, 96)
    assert all(0 <= v <= 256 for a in anchors for v in a)
