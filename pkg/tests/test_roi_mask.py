from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringloc.core import GeometryError
from ringloc.detect import RoiBox, detect_rings
from ringloc.roi_mask import EmptyContourError, crop_depth, dilate_mask, extract_contour, make_mask, survivors
from ringloc.simulate import DEFAULT_INTRINSICS

from conftest import cached_render


def square_loop(x0, y0, n):
    """Closed 8-connected boundary of an n x n pixel square, clockwise."""
    top = [(x0 + i, y0) for i in range(n)]
    right = [(x0 + n - 1, y0 + i) for i in range(1, n)]
    bottom = [(x0 + n - 1 - i, y0 + n - 1) for i in range(1, n)]
    left = [(x0, y0 + n - 1 - i) for i in range(1, n - 1)]
    return np.array(top + right + bottom + left)


class TestExtractContour:
    def test_white_disk_boundary(self):
        img = np.zeros((60, 60), dtype=np.uint8)
        yy, xx = np.mgrid[:60, :60]
        disk = (xx - 30) ** 2 + (yy - 30) ** 2 <= 12**2
        img[disk] = 255
        contour = extract_contour(img, RoiBox(10, 10, 40, 40))
        mask = make_mask(contour, 60, 60).astype(bool)
        # the 3x3 opening trims the four one-pixel tips of the rasterized disk
        assert not (mask & ~disk).any()
        assert (disk & ~mask).sum() <= 4
        # every contour pixel lies in the blob and has a background 4-neighbor
        for x, y in contour:
            assert mask[y, x]
            assert not (mask[y - 1, x] and mask[y + 1, x] and mask[y, x - 1] and mask[y, x + 1])

    def test_blank_roi(self):
        with pytest.raises(EmptyContourError):
            extract_contour(np.full((40, 40), 90, dtype=np.uint8), RoiBox(5, 5, 20, 20))

    def test_roi_outside_image(self):
        with pytest.raises(GeometryError):
            extract_contour(np.zeros((40, 40), dtype=np.uint8), RoiBox(30, 30, 20, 20))

    def test_render_area_matches_projected_disk(self):
        gray, _, truth = cached_render(tilt=0.0)
        (box, _), = detect_rings(gray, intrinsics=DEFAULT_INTRINSICS)
        mask = make_mask(extract_contour(gray, box), 640, 480)
        expected = math.pi * truth.projected_outer_radius**2
        assert abs(mask.sum() - expected) <= 0.05 * expected

    def test_render_contour_encloses_projected_center(self):
        gray, _, truth = cached_render(tilt=30.0)
        (box, _), = detect_rings(gray, intrinsics=DEFAULT_INTRINSICS)
        mask = make_mask(extract_contour(gray, box), 640, 480)
        u, v = np.rint(truth.projected_center).astype(int)
        assert mask[v, u] == 1
        # foreshortened to an ellipse: area tracks cos(tilt)
        expected = math.pi * truth.projected_outer_radius**2 * math.cos(math.radians(30))
        assert abs(mask.sum() - expected) <= 0.05 * expected


class TestMakeMask:
    def test_square(self):
        mask = make_mask(square_loop(3, 4, 10), 20, 20)
        assert mask.sum() == 100
        assert mask.dtype == np.uint8 and set(np.unique(mask)) == {0, 1}
        assert mask[4:14, 3:13].all()

    def test_empty_contour(self):
        with pytest.raises(EmptyContourError):
            make_mask(np.zeros((0, 2)), 10, 10)

    def test_open_contour(self):
        with pytest.raises(GeometryError):
            make_mask(np.array([(0, 0), (1, 0), (2, 0), (8, 8)]), 10, 10)

    @settings(max_examples=30, deadline=None)
    @given(x0=st.integers(0, 20), y0=st.integers(0, 20), n=st.integers(2, 15))
    def test_direction_invariant(self, x0, y0, n):
        loop = square_loop(x0, y0, n)
        a = make_mask(loop, 40, 40)
        b = make_mask(loop[::-1], 40, 40)
        np.testing.assert_array_equal(a, b)
        assert a.sum() == n * n


class TestDilate:
    def test_single_pixel_grows_to_square(self):
        m = np.zeros((9, 9), dtype=np.uint8)
        m[4, 4] = 1
        assert [dilate_mask(m, p).sum() for p in range(4)] == [1, 9, 25, 49]

    def test_range(self):
        with pytest.raises(GeometryError):
            dilate_mask(np.zeros((3, 3)), 4)


class TestCropDepth:
    def test_all_ones_identity(self, rng):
        d = rng.uniform(100, 900, (6, 7))
        np.testing.assert_array_equal(crop_depth(d, np.ones((6, 7), dtype=np.uint8)), d)

    def test_all_zeros(self, rng):
        d = rng.uniform(100, 900, (6, 7))
        out = crop_depth(d, np.zeros((6, 7), dtype=np.uint8))
        assert not out.any()
        assert survivors(out).shape == (0, 3)

    def test_center_only(self):
        d = np.array([[5, 5, 5], [5, 7, 5], [5, 5, 5]], dtype=float)
        m = np.zeros((3, 3), dtype=np.uint8)
        m[1, 1] = 1
        assert survivors(crop_depth(d, m)).tolist() == [[1.0, 1.0, 7.0]]

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            crop_depth(np.ones((3, 3)), np.ones((3, 4), dtype=np.uint8))

    def test_non_binary_mask(self):
        with pytest.raises(GeometryError):
            crop_depth(np.ones((2, 2)), np.full((2, 2), 2))

    def test_keeps_native_precision(self):
        d = np.array([[400.123456789]])
        assert crop_depth(d, np.ones((1, 1), dtype=np.uint8))[0, 0] == 400.123456789

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_survivor_count_identity(self, seed):
        g = np.random.default_rng(seed)
        d = g.uniform(200, 800, (12, 15))
        d[g.random(d.shape) < 0.2] = 0.0
        m = (g.random(d.shape) < 0.5).astype(np.uint8)
        expected = int(m.sum()) - int(np.sum((m == 1) & (d == 0)))
        assert len(survivors(crop_depth(d, m))) == expected

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_mask_composition(self, seed):
        g = np.random.default_rng(seed)
        d = g.uniform(200, 800, (10, 10))
        m1 = (g.random(d.shape) < 0.6).astype(np.uint8)
        m2 = (g.random(d.shape) < 0.6).astype(np.uint8)
        np.testing.assert_array_equal(crop_depth(crop_depth(d, m1), m2), crop_depth(d, m1 & m2))

    def test_survivors_row_major(self):
        d = np.array([[0, 2.0], [3.0, 4.0]])
        assert survivors(d).tolist() == [[1, 0, 2.0], [0, 1, 3.0], [1, 1, 4.0]]
