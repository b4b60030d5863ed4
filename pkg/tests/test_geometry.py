import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffdet.geometry import (
    Box,
    BoxError,
    Detection,
    anchor_array,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)

from oracles import iou_ref, nms_ref

coord = st.floats(-200, 200, allow_nan=False)
side = st.floats(0.5, 150, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(side), draw(side)
    return Box(x, y, x + w, y + h)


class TestIoU:
    def test_identical(self):
        b = Box(3, 4, 10, 20)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_one_seventh(self):
        assert abs(iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) - 25 / 175) < 1e-12

    def test_degenerate_box_rejected(self):
        with pytest.raises(BoxError):
            Box(1, 1, 1, 2)

    @settings(max_examples=200)
    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, b) == pytest.approx(iou_ref(a.as_tuple(), b.as_tuple()), abs=1e-12)

    @given(boxes())
    def test_self(self, a):
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 50, (6, 2))
        a = np.hstack([a, a + rng.uniform(1, 30, (6, 2))])
        m = iou_matrix(a, a[::-1])
        for i in range(6):
            for j in range(6):
                assert m[i, j] == pytest.approx(iou(Box(*a[i]), Box(*a[::-1][j])), abs=1e-15)


class TestAnchors:
    def test_count_level2(self):
        anchors = generate_anchors(2, 16, 16, 64, 64)
        assert len(anchors) == 512
        assert {round(math.sqrt(a.box.area), 9) for a in anchors} == {16.0}

    def test_level7_side(self):
        a = generate_anchors(7, 1, 1, 128, 128)
        assert a[0].box.width == 512 and a[0].box.height == 512

    def test_first_anchor_centered(self):
        a = generate_anchors(2, 4, 4, 16, 16)[0]
        assert a.box.as_tuple() == (-6.0, -6.0, 10.0, 10.0)
        assert (a.row, a.col, a.aspect_index, a.level) == (0, 0, 0, 2)

    def test_aspect_equal_area_taller(self):
        for level in range(2, 8):
            arr = anchor_array(level, 1, 1)
            w0, h0 = arr[0, 0, 0, 2] - arr[0, 0, 0, 0], arr[0, 0, 0, 3] - arr[0, 0, 0, 1]
            w1, h1 = arr[0, 0, 1, 2] - arr[0, 0, 1, 0], arr[0, 0, 1, 3] - arr[0, 0, 1, 1]
            assert abs(w0 * h0 - w1 * h1) <= 1e-6 * w0 * h0
            assert h1 / w1 == pytest.approx(1.5)

    @pytest.mark.parametrize("h,w", [(128, 128), (256, 128), (384, 512)])
    def test_count_formula(self, h, w):
        for k in range(2, 8):
            fh, fw = h // 2**k, w // 2**k
            assert len(generate_anchors(k, fh, fw, w, h)) == math.ceil(h / 2**k) * math.ceil(w / 2**k) * 2

    def test_not_clipped(self):
        arr = anchor_array(5, 4, 4)
        assert arr.min() < 0 and arr.max() > 128

    def test_bad_level(self):
        with pytest.raises(ValueError):
            generate_anchors(1, 2, 2, 8, 8)


class TestDeltas:
    def test_identity(self):
        b = Box(1, 2, 30, 40)
        assert encode_box(b, b) == (0.0, 0.0, 0.0, 0.0)

    def test_hand_arithmetic(self):
        dx, dy, dw, dh = encode_box(Box(0, 0, 16, 16), Box(4, 4, 20, 20))
        assert (dx, dy) == (0.25, 0.25)
        assert dw == 0.0 and dh == 0.0

    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        n = 10_000
        a = rng.uniform(-50, 200, (n, 2))
        a = np.hstack([a, a + rng.uniform(4, 300, (n, 2))])
        g = rng.uniform(-50, 200, (n, 2))
        g = np.hstack([g, g + rng.uniform(1, 300, (n, 2))])
        back = decode_boxes(a, encode_boxes(a, g))
        assert np.max(np.abs(back - g)) < 1e-9

    def test_scalar_roundtrip(self):
        a, g = Box(0, 0, 16, 24), Box(3, -2, 11, 30)
        back = decode_box(a, encode_box(a, g))
        assert np.allclose(back.as_tuple(), g.as_tuple(), atol=1e-9)

    def test_bad_gt_rejected(self):
        with pytest.raises(BoxError):
            encode_boxes([[0, 0, 10, 10]], [[5, 5, 5, 9]])


class TestNMS:
    def test_single(self):
        assert nms([Detection(Box(0, 0, 1, 1), 0.5)], 0.5) == [0]

    def test_suppresses_overlap(self):
        a = Detection(Box(0, 0, 10, 10), 0.9)
        b = Detection(Box(0, 0, 10, 8), 0.8)
        assert iou(a.box, b.box) == pytest.approx(0.8)
        assert nms([a, b], 0.5) == [0]

    def test_keeps_disjoint(self):
        a = Detection(Box(0, 0, 10, 10), 0.9)
        b = Detection(Box(0, 0, 10, 8), 0.8)
        c = Detection(Box(50, 50, 60, 60), 0.7)
        assert nms([a, b, c], 0.5) == [0, 2]

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            nms([], 1.0)

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(0, 21))
            xy = rng.uniform(0, 60, (n, 2))
            b = np.hstack([xy, xy + rng.uniform(2, 40, (n, 2))])
            s = rng.choice(rng.uniform(0, 1, 6), n)  # repeated scores exercise tie order
            t = float(rng.uniform(0.1, 0.9))
            assert nms(b, t, scores=s) == nms_ref(b.tolist(), s.tolist(), t)
