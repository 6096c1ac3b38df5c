import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdage.geometry import (
    BBox,
    Detection,
    crop_and_resize,
    expand_with_margins,
    iou,
    match_predictions,
    receptive_field,
    roi_affine_sample,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def iou_by_cell_count(a: BBox, b: BBox) -> float:
    """Count unit cells of integer-aligned boxes; exact reference for IOU."""
    cells_a = {
        (x, y)
        for x in range(int(a.x1), int(a.x2))
        for y in range(int(a.y1), int(a.y2))
    }
    cells_b = {
        (x, y)
        for x in range(int(b.x1), int(b.x2))
        for y in range(int(b.y1), int(b.y2))
    }
    inter = len(cells_a & cells_b)
    union = len(cells_a | cells_b)
    return inter / union


def bilinear_at(img: np.ndarray, y: float, x: float) -> np.ndarray:
    """Closed-form bilinear interpolation at one point, border-clamped."""
    h, w = img.shape[:2]
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ty, tx = y - y0, x - x0
    return (
        (1 - ty) * (1 - tx) * img[y0, x0]
        + (1 - ty) * tx * img[y0, x1]
        + ty * (1 - tx) * img[y1, x0]
        + ty * tx * img[y1, x1]
    )


def grid_positions(lo: float, extent: float, n: int) -> np.ndarray:
    """The sampling grid contract: n points spanning [lo, lo + extent - 1]."""
    span = max(extent - 1.0, 0.0)
    if n == 1:
        return np.array([lo + 0.5 * span])
    return lo + np.arange(n) * (span / (n - 1))


def int_boxes(rng: np.random.Generator, n: int) -> list[BBox]:
    boxes = []
    for _ in range(n):
        x1, y1 = rng.integers(0, 30, size=2)
        w, h = rng.integers(1, 20, size=2)
        boxes.append(BBox(float(x1), float(y1), float(x1 + w), float(y1 + h)))
    return boxes


finite_box = st.builds(
    lambda x, y, w, h: BBox(x, y, x + w, y + h),
    st.floats(-100, 100),
    st.floats(-100, 100),
    st.floats(0.1, 200),
    st.floats(0.1, 200),
)


# ---------------------------------------------------------------------------
# BBox / Detection invariants
# ---------------------------------------------------------------------------

def test_bbox_rejects_degenerate_and_nonfinite():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 10)
    with pytest.raises(ValueError):
        BBox(5, 0, 4, 10)
    with pytest.raises(ValueError):
        BBox(0, 0, float("inf"), 10)


def test_detection_confidence_range():
    box = BBox(0, 0, 1, 1)
    Detection(box, 0.0)
    Detection(box, 1.0)
    with pytest.raises(ValueError):
        Detection(box, 1.5)


# ---------------------------------------------------------------------------
# iou
# ---------------------------------------------------------------------------

def test_iou_spec_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    b = BBox(5, 5, 15, 15)
    assert iou(a, b) == pytest.approx(25 / 175, abs=1e-12)


def test_iou_matches_cell_counting_exactly():
    rng = np.random.default_rng(0)
    boxes = int_boxes(rng, 2000)
    for a, b in zip(boxes[::2], boxes[1::2]):
        if iou_by_cell_count(a, b) != iou(a, b):
            pytest.fail(f"iou mismatch for {a} vs {b}")


@given(finite_box, finite_box)
@settings(max_examples=200)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# expand_with_margins
# ---------------------------------------------------------------------------

def test_expand_spec_examples():
    out = expand_with_margins(BBox(100, 100, 200, 200), 0.2, 0.1, 1000, 1000)
    assert out.as_tuple() == (90, 80, 210, 210)
    out = expand_with_margins(BBox(0, 0, 100, 100), 0.2, 0.1, 1000, 1000)
    assert out.as_tuple() == (0, 0, 110, 110)
    box = BBox(3, 4, 50, 60)
    assert expand_with_margins(box, 0.0, 0.0, 100, 100) == box


@given(
    st.builds(
        lambda x, y, w, h: BBox(x, y, x + w, y + h),
        st.floats(0, 90),
        st.floats(0, 90),
        st.floats(0.5, 60),
        st.floats(0.5, 60),
    ),
    st.floats(0, 1),
    st.floats(0, 1),
)
@settings(max_examples=200)
def test_expand_within_bounds_and_contains_input(box, top, other):
    image_w = image_h = 128
    out = expand_with_margins(box, top, other, image_w, image_h)
    assert 0 <= out.x1 < out.x2 <= image_w
    assert 0 <= out.y1 < out.y2 <= image_h
    # contains the input box after clipping the input to the image
    assert out.x1 <= max(box.x1, 0) and out.y1 <= max(box.y1, 0)
    assert out.x2 >= min(box.x2, image_w) and out.y2 >= min(box.y2, image_h)


# ---------------------------------------------------------------------------
# match_predictions
# ---------------------------------------------------------------------------

def test_match_spec_examples():
    gt = BBox(0, 0, 10, 10)
    pred = Detection(gt, 0.9)
    (m,) = match_predictions([pred], [gt], 0.3)
    assert m.included and m.matched_gt_index == 0 and m.max_iou == 1.0

    # max IOU 0.1 at threshold 0.3 -> excluded (strict inequality)
    far = Detection(BBox(0, 0, 10, 10), 0.9)
    weak_gt = BBox(9, 9, 19, 19)  # IOU 1/199 < 0.3
    (m,) = match_predictions([far], [weak_gt], 0.3)
    assert not m.included

    # overlap gt#1 at ~0.6 and gt#0 at ~0.2 -> matches index 1
    p = Detection(BBox(10, 0, 20, 10), 0.5)
    gts = [BBox(16, 0, 26, 10), BBox(11, 0, 19, 10)]
    (m,) = match_predictions([p], gts, 0.3)
    # brute-force oracle over all pairs
    best = max(range(len(gts)), key=lambda i: iou(p.box, gts[i]))
    assert m.matched_gt_index == best == 1


def test_match_empty_gts_excludes_all():
    preds = [Detection(BBox(0, 0, 5, 5), 0.8), Detection(BBox(1, 1, 4, 4), 0.2)]
    results = match_predictions(preds, [], 0.3)
    assert all(not r.included and r.matched_gt_index is None for r in results)


def test_match_order_permutation_and_threshold_monotone():
    rng = np.random.default_rng(3)
    gts = int_boxes(rng, 4)
    preds = [Detection(b, 0.5) for b in int_boxes(rng, 6)]
    base = match_predictions(preds, gts, 0.2)
    perm = [3, 1, 5, 0, 2, 4]
    shuffled = match_predictions([preds[i] for i in perm], gts, 0.2)
    for new_idx, old_idx in enumerate(perm):
        assert shuffled[new_idx].max_iou == base[old_idx].max_iou
        assert shuffled[new_idx].matched_gt_index == base[old_idx].matched_gt_index
    # raising the threshold never turns excluded into included
    stricter = match_predictions(preds, gts, 0.5)
    for lo, hi in zip(base, stricter):
        assert lo.included or not hi.included


# ---------------------------------------------------------------------------
# crop_and_resize
# ---------------------------------------------------------------------------

def test_crop_constant_image_is_constant():
    img = np.full((40, 30, 3), 0.7, dtype=np.float64)
    out = crop_and_resize(img, BBox(3.2, 4.9, 21.4, 30.0), out_h=16, out_w=12)
    assert out.shape == (16, 12, 3)
    assert np.allclose(out, 0.7)


def test_crop_exact_size_region_is_identity_copy():
    rng = np.random.default_rng(1)
    img = rng.random((50, 40, 2))
    out = crop_and_resize(img, BBox(5, 7, 5 + 12, 7 + 16), out_h=16, out_w=12)
    assert np.array_equal(out, img[7:23, 5:17])


def test_crop_checkerboard_matches_closed_form():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
    out = crop_and_resize(img, BBox(0, 0, 2, 2), out_h=3, out_w=3)[:, :, 0]
    # hand-computed bilinear weights on the [0, 1] x [0, 1] grid
    assert out[0, 0] == 0.0 and out[0, 2] == 1.0
    assert out[0, 1] == pytest.approx(0.5)
    assert out[1, 1] == pytest.approx(0.5)
    expected = np.array(
        [[bilinear_at(img, y, x)[0] for x in (0, 0.5, 1.0)] for y in (0, 0.5, 1.0)]
    )
    assert np.allclose(out, expected, atol=1e-12)


def test_crop_rounds_region_to_nearest_pixel():
    rng = np.random.default_rng(2)
    img = rng.random((20, 20, 1))
    a = crop_and_resize(img, BBox(2.4, 3.4, 10.4, 11.4), out_h=8, out_w=8)
    b = crop_and_resize(img, BBox(2.0, 3.0, 10.0, 11.0), out_h=8, out_w=8)
    assert np.array_equal(a, b)


def test_crop_torch_roundtrip_and_gradients_stay_in_region():
    img = torch.rand(24, 24, 3, dtype=torch.float64, requires_grad=True)
    out = crop_and_resize(img, BBox(4, 6, 12, 18), out_h=10, out_w=6)
    out.sum().backward()
    grad = img.grad
    outside = grad.clone()
    outside[6:18, 4:12] = 0.0
    assert torch.count_nonzero(outside) == 0
    assert torch.count_nonzero(grad) > 0


# ---------------------------------------------------------------------------
# roi_affine_sample
# ---------------------------------------------------------------------------

def test_roi_constant_field_is_constant():
    feat = np.full((12, 9, 5), 2.5)
    out = roi_affine_sample(feat, BBox(1.3, 0.7, 8.9, 11.2), out_h=14, out_w=10)
    assert out.shape == (14, 10, 5)
    assert np.allclose(out, 2.5)


def test_roi_integer_grid_is_subsample_copy():
    rng = np.random.default_rng(4)
    feat = rng.random((20, 16, 3))
    out = roi_affine_sample(feat, BBox(2, 3, 2 + 10, 3 + 14), out_h=14, out_w=10)
    assert np.array_equal(out, feat[3:17, 2:12])


def test_roi_linear_ramp_matches_sample_positions():
    h, w = 16, 12
    ramp = np.tile(np.arange(w, dtype=np.float64), (h, 1))[:, :, None]
    region = BBox(1.25, 2.5, 9.75, 13.0)
    out = roi_affine_sample(ramp, region, out_h=5, out_w=7)[:, :, 0]
    xs = grid_positions(region.x1, region.width, 7)
    expected = np.tile(xs, (5, 1))
    assert np.allclose(out, expected, atol=1e-9)


def test_roi_values_within_feature_range():
    rng = np.random.default_rng(5)
    for _ in range(50):
        feat = rng.random((10, 10, 2))
        x1, y1 = rng.uniform(0, 5, size=2)
        region = BBox(x1, y1, x1 + rng.uniform(1, 5), y1 + rng.uniform(1, 5))
        out = roi_affine_sample(feat, region, out_h=4, out_w=6)
        assert out.min() >= feat.min() - 1e-12
        assert out.max() <= feat.max() + 1e-12


def test_roi_region_outside_feature_gives_zeros():
    feat = np.ones((8, 8, 1))
    out = roi_affine_sample(feat, BBox(20, 20, 30, 30), out_h=3, out_w=3)
    assert np.array_equal(out, np.zeros((3, 3, 1)))


# ---------------------------------------------------------------------------
# receptive_field
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(0, 1), (1, 3), (7, 15)])
def test_receptive_field(n, expected):
    assert receptive_field(n) == expected
