from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hatbench.geometry import (
    BBox,
    GeometryError,
    ImageDims,
    NoPositiveOverlap,
    ZeroAreaAfterClamp,
    clamp,
    crop_to_original,
    intersect,
    iou,
    original_to_crop,
)
from oracles import exact_interval_iou, interval_intersection, pixel_grid_iou


def boxes(min_side=0.5, max_side=300.0, span=500.0):
    coord = st.floats(-span, span, allow_nan=False, allow_infinity=False)
    side = st.floats(min_side, max_side, allow_nan=False, allow_infinity=False)
    return st.builds(lambda x, y, w, h: BBox(x, y, x + w, y + h), coord, coord, side, side)


class TestBBox:
    def test_valid_construction(self):
        b = BBox(1.0, 2.0, 4.0, 7.5)
        assert b.width == 3.0
        assert b.height == 5.5
        assert b.area == 16.5

    @pytest.mark.parametrize(
        "coords",
        [(0, 0, 0, 10), (0, 0, 10, 0), (5, 0, 4, 10), (0, 0, float("inf"), 1), (0, float("nan"), 1, 1)],
    )
    def test_invalid_construction(self, coords):
        with pytest.raises(GeometryError):
            BBox(*coords)

    def test_dims_validation(self):
        with pytest.raises(GeometryError):
            ImageDims(0, 5)


class TestIou:
    def test_identical_boxes(self):
        b = BBox(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0

    def test_partial_overlap_exact_value(self):
        # intersection 1, union 4 + 4 - 1 = 7
        a, b = BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert pixel_grid_iou(a.as_tuple(), b.as_tuple()) == pytest.approx(1 / 7, abs=1e-12)

    def test_touching_edges_is_zero(self):
        assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0
        assert intersect(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) is None

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        ab = iou(a, b)
        assert ab == iou(b, a)
        assert 0.0 <= ab <= 1.0

    @given(boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == 1.0

    @given(boxes(), boxes(), st.floats(-1000, 1000), st.floats(-1000, 1000))
    def test_translation_invariance(self, a, b, dx, dy):
        assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(
            iou(a, b), abs=1e-12
        )

    @given(boxes(), boxes(), st.floats(0.01, 100.0))
    def test_scale_invariance(self, a, b, s):
        scaled_a = BBox(a.xmin * s, a.ymin * s, a.xmax * s, a.ymax * s)
        scaled_b = BBox(b.xmin * s, b.ymin * s, b.xmax * s, b.ymax * s)
        assert iou(scaled_a, scaled_b) == pytest.approx(iou(a, b), abs=1e-12)

    def test_agrees_with_pixel_grid_on_random_integer_boxes(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            a = _random_int_box(rng)
            b = _random_int_box(rng)
            got = iou(BBox(*a), BBox(*b))
            assert got == pytest.approx(pixel_grid_iou(a, b), abs=2 / min_area(a, b))
            assert got == pytest.approx(exact_interval_iou(a, b), abs=1e-12)


def _random_int_box(rng, span=60, max_side=25):
    x0 = int(rng.integers(0, span))
    y0 = int(rng.integers(0, span))
    w = int(rng.integers(1, max_side))
    h = int(rng.integers(1, max_side))
    return (x0, y0, x0 + w, y0 + h)


def min_area(a, b):
    return min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


class TestClamp:
    def test_negative_corner(self):
        assert clamp(BBox(-5, -5, 10, 10), ImageDims(100, 100)) == BBox(0, 0, 10, 10)

    def test_overflowing_corner(self):
        assert clamp(BBox(90, 90, 120, 120), ImageDims(100, 100)) == BBox(90, 90, 100, 100)

    def test_fully_outside_raises(self):
        with pytest.raises(ZeroAreaAfterClamp):
            clamp(BBox(150, 150, 200, 200), ImageDims(100, 100))


class TestCropTransforms:
    def test_pure_translation(self):
        out = crop_to_original(BBox(100, 50, 300, 250), BBox(10, 20, 60, 80))
        assert out == BBox(110, 70, 160, 130)

    def test_whole_image_crop_is_identity(self):
        dims = ImageDims(640, 480)
        local = BBox(12.5, 20.0, 100.0, 200.0)
        assert crop_to_original(dims.as_box(), local, dims) == local

    def test_local_box_spilling_before_crop_origin(self):
        # translate (-2,-2,4,4) by (5,5): (3,3,9,9), inside a 20x20 image
        out = crop_to_original(BBox(5, 5, 15, 15), BBox(-2, -2, 4, 4), ImageDims(20, 20))
        assert out == BBox(3, 3, 9, 9)

    def test_zero_area_after_clamp_raises(self):
        with pytest.raises(ZeroAreaAfterClamp):
            crop_to_original(BBox(90, 90, 100, 100), BBox(15, 15, 30, 30), ImageDims(100, 100))

    def test_inverse_of_translation_examples(self):
        assert original_to_crop(BBox(100, 50, 300, 250), BBox(110, 70, 160, 130)) == BBox(
            10, 20, 60, 80
        )

    def test_fully_inside_is_exact_inverse(self):
        crop = BBox(30, 40, 200, 260)
        inner = BBox(50, 60, 120, 130)
        assert original_to_crop(crop, inner) == inner.translate(-30, -40)

    def test_partially_outside_is_clipped(self):
        crop = BBox(10, 10, 50, 50)
        spilling = BBox(40, 5, 80, 30)
        expected = interval_intersection(crop.as_tuple(), spilling.as_tuple())
        got = original_to_crop(crop, spilling)
        assert got.translate(crop.xmin, crop.ymin).as_tuple() == expected

    def test_disjoint_raises(self):
        with pytest.raises(NoPositiveOverlap):
            original_to_crop(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30))

    @given(boxes(span=300), st.data())
    @settings(max_examples=200)
    def test_round_trip_within_half_pixel(self, crop, data):
        # inner box drawn fully inside the crop window, in crop-frame coordinates
        fx0 = data.draw(st.floats(0.0, 0.8))
        fy0 = data.draw(st.floats(0.0, 0.8))
        fx1 = data.draw(st.floats(fx0 + 0.1, 1.0))
        fy1 = data.draw(st.floats(fy0 + 0.1, 1.0))
        local = BBox(fx0 * crop.width, fy0 * crop.height, fx1 * crop.width, fy1 * crop.height)
        back = original_to_crop(crop, crop_to_original(crop, local))
        for got, want in zip(back.as_tuple(), local.as_tuple()):
            assert abs(got - want) <= 0.5
