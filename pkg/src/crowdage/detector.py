"""Keypoint-heatmap face detector: target encoding, top-K decoding, loss, network.

The detector predicts a single-class center heatmap at 1/4 of its input
resolution together with per-cell box size (in input pixels) and sub-cell
center offset maps. Its stride-4 backbone feature doubles as the source of
the intermediate-feature connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ConvBNReLU, ResidualBlock
from .geometry import BBox, Detection

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
HEATMAP_EPS = 1e-6


@dataclass
class KeypointTargets:
    """Ground-truth maps at the detector's output stride.

    Maps may carry a leading batch dimension; ``heatmap`` is (H, W) or
    (B, H, W), the size/offset maps add a trailing pair (w, h) / (dx, dy),
    and size/offset are supervised only where ``center_mask`` is set.
    """

    heatmap: np.ndarray
    size_map: np.ndarray
    offset_map: np.ndarray
    center_mask: np.ndarray


@dataclass
class DetectorOutput:
    """Predicted maps in the same layout as KeypointTargets, heatmap post-sigmoid."""

    heatmap: torch.Tensor
    size_map: torch.Tensor
    offset_map: torch.Tensor

    def single(self, i: int) -> "DetectorOutput":
        return DetectorOutput(self.heatmap[i], self.size_map[i], self.offset_map[i])


class DetectionLossTerms(NamedTuple):
    total: torch.Tensor
    l_reg: torch.Tensor
    l_size: torch.Tensor
    l_off: torch.Tensor


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner displacement (in cells) keeping IOU >= min_overlap.

    Solves the three displacement scenarios (both corners inward, outward,
    and one each way) and returns the tightest radius.
    """
    h, w = height, width

    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * a1 * c1, 0.0))) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (-b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Splat a unit-peak Gaussian at (cx, cy), combining by elementwise max."""
    sigma = (2 * radius + 1) / 6.0
    span = np.arange(-radius, radius + 1, dtype=np.float64)
    gauss = np.exp(-(span[:, None] ** 2 + span[None, :] ** 2) / (2 * sigma * sigma))
    h, w = heatmap.shape
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    left, right = min(cx, radius), min(w - cx, radius + 1)
    window = heatmap[cy - top : cy + bottom, cx - left : cx + right]
    np.maximum(
        window,
        gauss[radius - top : radius + bottom, radius - left : radius + right],
        out=window,
    )


def encode_targets(scene, input_side: int = 480, stride: int = 4) -> KeypointTargets:
    """Encode a scene's faces into heatmap/size/offset targets.

    The scene is notionally resized to input_side x input_side; each face
    contributes a Gaussian peaking at exactly 1.0 at its center cell, where
    the box size (input pixels) and sub-cell offset are recorded. Overlapping
    Gaussians combine by max. A face smaller than one cell still lands on its
    single center cell.
    """
    side = input_side // stride
    heatmap = np.zeros((side, side), dtype=np.float32)
    size_map = np.zeros((side, side, 2), dtype=np.float32)
    offset_map = np.zeros((side, side, 2), dtype=np.float32)
    center_mask = np.zeros((side, side), dtype=bool)

    sx = input_side / scene.width
    sy = input_side / scene.height
    for face in scene.faces:
        box = face.box.scaled(sx, sy)
        cx, cy = box.center
        cxs, cys = cx / stride, cy / stride
        ix = min(int(cxs), side - 1)
        iy = min(int(cys), side - 1)
        radius = max(0, int(gaussian_radius(box.height / stride, box.width / stride)))
        draw_gaussian(heatmap, ix, iy, radius)
        heatmap[iy, ix] = 1.0
        center_mask[iy, ix] = True
        size_map[iy, ix] = (box.width, box.height)
        offset_map[iy, ix] = (cxs - ix, cys - iy)
    return KeypointTargets(heatmap, size_map, offset_map, center_mask)


def stack_targets(targets: list[KeypointTargets]) -> KeypointTargets:
    return KeypointTargets(
        np.stack([t.heatmap for t in targets]),
        np.stack([t.size_map for t in targets]),
        np.stack([t.offset_map for t in targets]),
        np.stack([t.center_mask for t in targets]),
    )


def decode_topk_tensors(
    heatmap: torch.Tensor,
    size_map: torch.Tensor,
    offset_map: torch.Tensor,
    k: int,
    stride: int = 4,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched decode: (B, H, W) maps -> boxes (B, k, 4) in input pixels, scores (B, k).

    Local maxima are isolated with 3x3 max-pool suppression before taking the
    top k cells. Boxes are clipped to the input extent and detached: box
    coordinates carry no gradient.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hm = heatmap.detach()
    b, h, w = hm.shape
    pooled = F.max_pool2d(hm.unsqueeze(1), 3, stride=1, padding=1).squeeze(1)
    scores = torch.where(pooled == hm, hm, torch.zeros_like(hm))
    top_scores, top_idx = scores.view(b, -1).topk(min(k, h * w))
    cy = (top_idx // w).float()
    cx = (top_idx % w).float()

    flat_off = offset_map.detach().reshape(b, -1, 2)
    flat_size = size_map.detach().reshape(b, -1, 2)
    off = torch.gather(flat_off, 1, top_idx.unsqueeze(-1).expand(-1, -1, 2))
    wh = torch.gather(flat_size, 1, top_idx.unsqueeze(-1).expand(-1, -1, 2))

    center_x = (cx + off[..., 0]) * stride
    center_y = (cy + off[..., 1]) * stride
    half_w = wh[..., 0].clamp(min=1.0) / 2
    half_h = wh[..., 1].clamp(min=1.0) / 2
    extent = float(w * stride)
    x1 = (center_x - half_w).clamp(0.0, extent - 1.0)
    y1 = (center_y - half_h).clamp(0.0, extent - 1.0)
    x2 = (center_x + half_w).clamp(max=extent)
    y2 = (center_y + half_h).clamp(max=extent)
    x2 = torch.maximum(x2, x1 + 1.0)
    y2 = torch.maximum(y2, y1 + 1.0)
    boxes = torch.stack([x1, y1, x2, y2], dim=-1)
    return boxes, top_scores


def decode_topk(out: DetectorOutput, k: int, stride: int = 4) -> list[Detection]:
    """Decode exactly k detections from a single image's maps, best first."""
    hm, size_map, offset_map = out.heatmap, out.size_map, out.offset_map
    if hm.ndim == 3:
        if hm.shape[0] != 1:
            raise ValueError("decode_topk expects a single image; use decode_topk_tensors")
        hm, size_map, offset_map = hm[0], size_map[0], offset_map[0]
    boxes, scores = decode_topk_tensors(
        hm.unsqueeze(0), size_map.unsqueeze(0), offset_map.unsqueeze(0), k, stride
    )
    return [
        Detection(BBox(*boxes[0, i].tolist()), float(scores[0, i].clamp(0.0, 1.0)))
        for i in range(boxes.shape[1])
    ]


def detection_loss(
    pred: DetectorOutput, gt: KeypointTargets, weights
) -> DetectionLossTerms:
    """Penalty-reduced focal heatmap loss plus L1 size/offset terms.

    All sums are normalized by the ground-truth face count (clamped to 1);
    a batch with zero faces yields L_size = L_off = 0.
    """
    hm_pred = pred.heatmap.clamp(HEATMAP_EPS, 1.0 - HEATMAP_EPS)
    hm_gt = torch.as_tensor(gt.heatmap, dtype=hm_pred.dtype, device=hm_pred.device)
    mask = torch.as_tensor(gt.center_mask, device=hm_pred.device)
    if hm_pred.shape != hm_gt.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(hm_pred.shape)} vs {tuple(hm_gt.shape)}")

    n = int(mask.sum())
    norm = max(n, 1)
    pos = ((1.0 - hm_pred) ** FOCAL_ALPHA * torch.log(hm_pred))[mask].sum()
    neg = (
        (1.0 - hm_gt) ** FOCAL_BETA * hm_pred**FOCAL_ALPHA * torch.log(1.0 - hm_pred)
    )[~mask].sum()
    l_reg = -(pos + neg) / norm

    size_gt = torch.as_tensor(gt.size_map, dtype=hm_pred.dtype, device=hm_pred.device)
    off_gt = torch.as_tensor(gt.offset_map, dtype=hm_pred.dtype, device=hm_pred.device)
    if n == 0:
        l_size = hm_pred.new_zeros(())
        l_off = hm_pred.new_zeros(())
    else:
        l_size = (pred.size_map - size_gt).abs()[mask].sum() / norm
        l_off = (pred.offset_map - off_gt).abs()[mask].sum() / norm

    total = l_reg + weights.lambda_size * l_size + weights.lambda_off * l_off
    return DetectionLossTerms(total, l_reg, l_size, l_off)


class FaceDetector(nn.Module):
    """Encoder-decoder keypoint network with stride-4 outputs.

    ``forward`` returns the prediction maps plus the stride-4 backbone
    feature (``branch_channels`` wide) that feeds the intermediate-feature
    connection; the heads hang off that same feature.
    """

    def __init__(
        self,
        widths: tuple[int, int, int, int] = (32, 64, 128, 256),
        branch_channels: int = 48,
        head_width: int = 64,
    ):
        super().__init__()
        self.branch_channels = branch_channels
        self.stem = ConvBNReLU(3, widths[0], stride=2)
        self.down1 = ResidualBlock(widths[0], widths[1], stride=2)
        self.down2 = ResidualBlock(widths[1], widths[2], stride=2)
        self.down3 = ResidualBlock(widths[2], widths[3], stride=2)
        self.up2 = ConvBNReLU(widths[3], widths[2])
        self.lat2 = nn.Conv2d(widths[2], widths[2], 1)
        self.up1 = ConvBNReLU(widths[2], widths[1])
        self.lat1 = nn.Conv2d(widths[1], widths[1], 1)
        self.out_conv = ConvBNReLU(widths[1], branch_channels)
        self.head_heatmap = self._head(head_width, 1)
        self.head_size = self._head(head_width, 2)
        self.head_offset = self._head(head_width, 2)
        # bias the heatmap toward the background prior
        nn.init.constant_(self.head_heatmap[-1].bias, -2.19)

    def _head(self, width: int, out_channels: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(self.branch_channels, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_channels, 1),
        )

    def forward(self, x: torch.Tensor) -> tuple[DetectorOutput, torch.Tensor]:
        d0 = self.stem(x)
        d1 = self.down1(d0)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u2 = self.up2(F.interpolate(d3, scale_factor=2.0, mode="nearest")) + self.lat2(d2)
        u1 = self.up1(F.interpolate(u2, scale_factor=2.0, mode="nearest")) + self.lat1(d1)
        branch = self.out_conv(u1)
        heatmap = torch.sigmoid(self.head_heatmap(branch)).squeeze(1)
        size_map = self.head_size(branch).permute(0, 2, 3, 1)
        offset_map = self.head_offset(branch).permute(0, 2, 3, 1)
        return DetectorOutput(heatmap, size_map, offset_map), branch
