import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ltmu.core import (CUE_DIM, BoundingBox, CueVector, FrameDims, TimeSliceWindow, center_distance, iou,
                       normalize_box)

coord = st.floats(-200, 200, allow_nan=False)
size = st.one_of(st.just(0.0), st.floats(0.01, 150))
boxes = st.builds(BoundingBox, coord, coord, size, size)


def test_iou_known_values():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 5, 5)) == 0.0
    # half-width shift: inter 50, union 150
    assert iou(a, BoundingBox(5, 0, 10, 10)) == pytest.approx(1 / 3)
    # touching edges share no area
    assert iou(a, BoundingBox(10, 0, 10, 10)) == 0.0


def test_iou_zero_area():
    z = BoundingBox(3, 3, 0, 0)
    assert iou(z, z) == 0.0
    assert iou(z, BoundingBox(0, 0, 10, 10)) == 0.0


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(boxes)
def test_iou_self(a):
    assert iou(a, a) == pytest.approx(1.0 if a.area > 0 else 0.0, abs=1e-9)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, -1, 2)
    with pytest.raises(ValueError):
        BoundingBox(math.nan, 0, 1, 1)
    with pytest.raises(ValueError):
        FrameDims(0, 10)


def test_normalize_box():
    dims = FrameDims(100, 100)
    np.testing.assert_allclose(normalize_box(BoundingBox(10, 20, 30, 40), dims), [0.1, 0.2, 0.3, 0.4])
    # entries clamp independently
    np.testing.assert_allclose(normalize_box(BoundingBox(-5, 0, 10, 10), dims), [0, 0, 0.1, 0.1])
    np.testing.assert_allclose(normalize_box(BoundingBox(50, 50, 300, 10), dims), [0.5, 0.5, 1.0, 0.1])


@given(boxes)
def test_normalize_box_in_unit_cube(b):
    v = normalize_box(b, FrameDims(640, 480))
    assert v.shape == (4,)
    assert np.all((v >= 0) & (v <= 1))


def test_center_distance():
    assert center_distance(BoundingBox(0, 0, 2, 2), BoundingBox(3, 4, 2, 2)) == 5.0


def test_cue_vector_layout_and_round_trip():
    cv = CueVector(0.9, tuple(range(8)), 0.3, (0.1, 0.2, 0.3, 0.4))
    a = cv.as_array()
    assert a.shape == (CUE_DIM,)
    assert a[0] == 0.9 and a[9] == 0.3
    np.testing.assert_array_equal(a[1:9], np.arange(8))
    np.testing.assert_array_equal(cv.as_array(drop_response=True), [0.9, 0.3, 0.1, 0.2, 0.3, 0.4])
    assert CueVector.from_array(a) == cv


def test_cue_vector_rejects_bad_shapes():
    with pytest.raises(ValueError):
        CueVector(0.1, (0.0,) * 7, 0.0, (0, 0, 0, 0))
    with pytest.raises(ValueError):
        CueVector(math.inf, (0.0,) * 8, 0.0, (0, 0, 0, 0))
    with pytest.raises(ValueError):
        CueVector.from_array(np.zeros(13))


def test_window_stacks_oldest_first():
    vs = tuple(CueVector(float(i), (0.0,) * 8, 0.0, (0, 0, 0, 0)) for i in range(5))
    w = TimeSliceWindow(vs)
    assert len(w) == 5
    np.testing.assert_array_equal(w.as_array()[:, 0], np.arange(5))
    assert w.as_array(drop_response=True).shape == (5, 6)
