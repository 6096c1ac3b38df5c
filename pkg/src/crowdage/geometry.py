"""Box arithmetic, IOU matching, and differentiable region sampling.

Coordinates are pixels, x to the right and y down. Boxes are half-open on
the high edges, so an integer-aligned box (x1, y1, x2, y2) covers the pixel
centers x1 .. x2-1 and y1 .. y2-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with x1 < x2 and y1 < y2, finite coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Detection:
    """A predicted face box with a confidence in [0, 1]."""

    box: BBox
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one prediction against all ground-truth boxes."""

    pred_index: int
    matched_gt_index: Optional[int]
    max_iou: float
    included: bool


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes. Symmetric, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def expand_with_margins(
    box: BBox,
    top_frac: float,
    other_frac: float,
    image_w: float,
    image_h: float,
) -> BBox:
    """Grow a box by a fraction of its own size, then clip to the image.

    The top edge moves up by ``top_frac * height``; the left, right and
    bottom edges move outward by ``other_frac`` of the width or height.
    Clipping never produces an empty box because the input box intersects
    the image.
    """
    if top_frac < 0 or other_frac < 0:
        raise ValueError("margin fractions must be >= 0")
    w, h = box.width, box.height
    return BBox(
        max(0.0, box.x1 - other_frac * w),
        max(0.0, box.y1 - top_frac * h),
        min(float(image_w), box.x2 + other_frac * w),
        min(float(image_h), box.y2 + other_frac * h),
    )


def match_predictions(
    preds: Sequence[Detection],
    gts: Sequence[BBox],
    th_iou: float,
) -> list[MatchResult]:
    """Match every prediction to its best-overlapping ground-truth box.

    A prediction is included when its max IOU strictly exceeds ``th_iou``;
    ties between ground-truth boxes break toward the lowest index. With no
    ground truth at all, every prediction is excluded and unmatched.
    """
    if not (0.0 <= th_iou < 1.0):
        raise ValueError(f"th_iou {th_iou} outside [0, 1)")
    results = []
    for i, det in enumerate(preds):
        if not gts:
            results.append(MatchResult(i, None, 0.0, False))
            continue
        ious = [iou(det.box, g) for g in gts]
        best = int(np.argmax(ious))
        best_iou = ious[best]
        results.append(MatchResult(i, best, best_iou, best_iou > th_iou))
    return results


def receptive_field(n_layers: int) -> int:
    """Receptive-field side of ``n_layers`` stacked 3x3 stride-1 convolutions."""
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    return 2 * n_layers + 1


def _sample_positions(lo: float, extent: float, n: int) -> torch.Tensor:
    """n sample coordinates spanning [lo, lo + extent - 1] inclusive."""
    span = max(extent - 1.0, 0.0)
    if n == 1:
        return torch.tensor([lo + 0.5 * span], dtype=torch.float64)
    return lo + torch.arange(n, dtype=torch.float64) * (span / (n - 1))


def _bilinear_sample(feature: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) feature at the grid ys x xs with bilinear weights.

    Sample coordinates are clamped to the feature extent (border replicate).
    Differentiable with respect to the feature values only; the coordinates
    carry no gradient.
    """
    h, w = feature.shape[0], feature.shape[1]
    ys = ys.clamp(0.0, float(h - 1))
    xs = xs.clamp(0.0, float(w - 1))
    y0 = ys.floor()
    x0 = xs.floor()
    ty = (ys - y0).to(feature.dtype)
    tx = (xs - x0).to(feature.dtype)
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    f00 = feature[y0[:, None], x0[None, :]]
    f01 = feature[y0[:, None], x1[None, :]]
    f10 = feature[y1[:, None], x0[None, :]]
    f11 = feature[y1[:, None], x1[None, :]]
    ty = ty[:, None, None]
    tx = tx[None, :, None]
    top = f00 * (1 - tx) + f01 * tx
    bot = f10 * (1 - tx) + f11 * tx
    return top * (1 - ty) + bot * ty


def round_region(region: BBox, image_w: int, image_h: int) -> BBox:
    """Round a region to whole pixels, clipped to the image, at least 1x1."""
    x1 = int(np.rint(region.x1))
    y1 = int(np.rint(region.y1))
    x2 = int(np.rint(region.x2))
    y2 = int(np.rint(region.y2))
    x1 = min(max(x1, 0), image_w - 1)
    y1 = min(max(y1, 0), image_h - 1)
    x2 = min(max(x2, x1 + 1), image_w)
    y2 = min(max(y2, y1 + 1), image_h)
    return BBox(float(x1), float(y1), float(x2), float(y2))


def crop_and_resize(image, region: BBox, out_h: int = 224, out_w: int = 160):
    """Crop a region from an (H, W, C) image and resample to out_h x out_w.

    The region is rounded to whole pixels first; the rounded region's pixel
    centers are then resampled bilinearly onto the output grid, so a region
    whose size already equals the output is copied exactly. Accepts a numpy
    array or a torch tensor and returns the matching kind; the torch path is
    differentiable with respect to the image values (never the region).
    """
    was_numpy = isinstance(image, np.ndarray)
    feat = torch.as_tensor(image) if was_numpy else image
    if feat.ndim != 3:
        raise ValueError(f"expected H x W x C image, got shape {tuple(feat.shape)}")
    h, w = feat.shape[0], feat.shape[1]
    r = round_region(region, w, h)
    ys = _sample_positions(r.y1, r.height, out_h)
    xs = _sample_positions(r.x1, r.width, out_w)
    out = _bilinear_sample(feat, ys, xs)
    return out.numpy() if was_numpy else out


def roi_affine_sample(feature, region: BBox, out_h: int = 14, out_w: int = 10):
    """Resample a (sub-pixel) region of an (h, w, c) feature map to a fixed grid.

    The region stays in float coordinates; the output grid spans the pixel
    centers the half-open region covers, interpolated bilinearly, so a region
    aligned to an integer out_h x out_w cell grid is a direct subsample copy.
    Differentiable with respect to the feature values; region coordinates are
    treated as constants. A region that misses the feature entirely yields
    zeros.
    """
    was_numpy = isinstance(feature, np.ndarray)
    feat = torch.as_tensor(feature) if was_numpy else feature
    if feat.ndim != 3:
        raise ValueError(f"expected h x w x c feature, got shape {tuple(feat.shape)}")
    h, w = feat.shape[0], feat.shape[1]
    if region.x2 <= 0 or region.y2 <= 0 or region.x1 >= w or region.y1 >= h:
        out = feat.new_zeros((out_h, out_w, feat.shape[2]))
        return out.numpy() if was_numpy else out
    ys = _sample_positions(region.y1, region.height, out_h)
    xs = _sample_positions(region.x1, region.width, out_w)
    out = _bilinear_sample(feat, ys, xs)
    return out.numpy() if was_numpy else out
