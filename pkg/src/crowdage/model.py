"""The combined network: detector and age estimator joined by two connections.

Per decoded face, a margin-expanded region is cropped from the full-resolution
image for the age backbone, and the same region of the detector's stride-4
feature is resampled to a fixed patch and concatenated inside the age
backbone. Region coordinates never carry gradients; the sampled values do.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .age_estimator import AgeEstimator, expected_age
from .detector import DetectorOutput, FaceDetector, decode_topk_tensors
from .geometry import (
    BBox,
    Detection,
    crop_and_resize,
    expand_with_margins,
    roi_affine_sample,
    round_region,
)
from .synth_data import GENDERS


@dataclass(frozen=True)
class ModelConfig:
    detector_input: int = 480
    stride: int = 4
    crop_h: int = 224
    crop_w: int = 160
    roi_h: int = 14
    roi_w: int = 10
    branch_channels: int = 48
    top_margin: float = 0.2
    other_margin: float = 0.1
    det_widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    det_head_width: int = 64
    age_widths: tuple[int, int, int, int] = (58, 115, 230, 461)
    age_blocks: tuple[int, int, int, int] = (3, 3, 7, 3)
    intermediate_connection: bool = True
    dropout: float = 0.2

    def __post_init__(self):
        if self.detector_input % self.stride != 0:
            raise ValueError("detector input must be divisible by the stride")
        if self.crop_h != 16 * self.roi_h or self.crop_w != 16 * self.roi_w:
            raise ValueError(
                f"crop {self.crop_h}x{self.crop_w} must be 16x the fusion patch "
                f"{self.roi_h}x{self.roi_w}"
            )


# paper preset mirrors the published geometry (480 input, 160x224 crops,
# 48-channel stride-4 branch fused at 1/16) with TResNet-S-like block counts;
# desk preset shrinks everything to CPU scale
PRESETS = {
    "paper": ModelConfig(),
    "desk": ModelConfig(
        detector_input=96,
        crop_h=80,
        crop_w=64,
        roi_h=5,
        roi_w=4,
        branch_channels=16,
        det_widths=(16, 24, 32, 48),
        det_head_width=32,
        age_widths=(16, 24, 32, 48),
        age_blocks=(1, 1, 1, 1),
    ),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class FaceEstimate:
    """One estimated face: detection plus decoded age and gender."""

    box: BBox
    confidence: float
    age: float
    gender: str
    age_probs: np.ndarray
    gender_probs: np.ndarray


@dataclass
class ModelPrediction:
    """Everything one forward pass produces for a batch of scenes."""

    det_out: DetectorOutput
    branch_feature: torch.Tensor
    detections: list[list[Detection]]
    crop_regions: list[list[BBox]]
    age_probs: torch.Tensor
    gender_probs: torch.Tensor


class MultiPersonAgeModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.detector = FaceDetector(
            config.det_widths, config.branch_channels, config.det_head_width
        )
        self.age_net = AgeEstimator(
            config.age_widths,
            config.age_blocks,
            config.branch_channels,
            use_roi_feature=config.intermediate_connection,
            dropout=config.dropout,
        )

    def forward(self, images: torch.Tensor, k: int) -> ModelPrediction:
        """Run the full pipeline on (B, H, W, 3) images in [0, 1].

        Always decodes exactly k faces per image; every decoded slot goes
        through the age network, and the masked losses decide which slots
        count. Gradients w.r.t. the input flow through the crops, the resized
        detector input, and (when connected) the sampled branch feature, but
        never through box coordinates.
        """
        cfg = self.config
        b, h, w = images.shape[0], images.shape[1], images.shape[2]
        side = cfg.detector_input
        if (h, w) != (side, side):
            full = BBox(0.0, 0.0, float(w), float(h))
            det_in = torch.stack(
                [crop_and_resize(images[i], full, side, side) for i in range(b)]
            )
        else:
            det_in = images
        det_out, branch = self.detector(det_in.permute(0, 3, 1, 2))
        boxes_in, scores = decode_topk_tensors(
            det_out.heatmap, det_out.size_map, det_out.offset_map, k, cfg.stride
        )

        sx, sy = w / side, h / side
        detections: list[list[Detection]] = []
        regions: list[list[BBox]] = []
        crops = []
        rois = []
        for i in range(b):
            dets_i, regions_i = [], []
            feature = branch[i].permute(1, 2, 0) if cfg.intermediate_connection else None
            for j in range(boxes_in.shape[1]):
                x1, y1, x2, y2 = boxes_in[i, j].tolist()
                conf = min(max(float(scores[i, j]), 0.0), 1.0)
                native = BBox(x1 * sx, y1 * sy, x2 * sx, y2 * sy)
                dets_i.append(Detection(native, conf))
                expanded = expand_with_margins(
                    native, cfg.top_margin, cfg.other_margin, w, h
                )
                region = round_region(expanded, w, h)
                regions_i.append(region)
                crops.append(crop_and_resize(images[i], region, cfg.crop_h, cfg.crop_w))
                if cfg.intermediate_connection:
                    scale = side / cfg.stride
                    feat_region = BBox(
                        expanded.x1 / w * scale,
                        expanded.y1 / h * scale,
                        expanded.x2 / w * scale,
                        expanded.y2 / h * scale,
                    )
                    patch = roi_affine_sample(feature, feat_region, cfg.roi_h, cfg.roi_w)
                    rois.append(patch.permute(2, 0, 1))
            detections.append(dets_i)
            regions.append(regions_i)

        crops_t = torch.stack(crops).permute(0, 3, 1, 2)
        rois_t = torch.stack(rois) if cfg.intermediate_connection else None
        age_probs, gender_probs = self.age_net(crops_t, rois_t)
        k_actual = boxes_in.shape[1]
        return ModelPrediction(
            det_out,
            branch,
            detections,
            regions,
            age_probs.view(b, k_actual, -1),
            gender_probs.view(b, k_actual, -1),
        )

    @torch.no_grad()
    def detect(self, image: np.ndarray, k: int = 20) -> list[Detection]:
        """Decode k detections from one (H, W, 3) image, best first."""
        images = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)
        cfg = self.config
        side = cfg.detector_input
        h, w = image.shape[:2]
        if (h, w) != (side, side):
            full = BBox(0.0, 0.0, float(w), float(h))
            det_in = crop_and_resize(images[0], full, side, side).unsqueeze(0)
        else:
            det_in = images
        det_out, _ = self.detector(det_in.permute(0, 3, 1, 2))
        boxes, scores = decode_topk_tensors(
            det_out.heatmap, det_out.size_map, det_out.offset_map, k, cfg.stride
        )
        sx, sy = w / side, h / side
        out = []
        for j in range(boxes.shape[1]):
            x1, y1, x2, y2 = boxes[0, j].tolist()
            conf = min(max(float(scores[0, j]), 0.0), 1.0)
            out.append(Detection(BBox(x1 * sx, y1 * sy, x2 * sx, y2 * sy), conf))
        return out

    @torch.no_grad()
    def estimate(
        self, image: np.ndarray, k: int = 20, conf_threshold: float = 0.2
    ) -> list[FaceEstimate]:
        """Full per-face estimates above the confidence threshold, best first."""
        images = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)
        pred = self.forward(images, k)
        out = []
        for j, det in enumerate(pred.detections[0]):
            if det.confidence <= conf_threshold:
                continue
            age_p = pred.age_probs[0, j].numpy()
            gender_p = pred.gender_probs[0, j].numpy()
            out.append(
                FaceEstimate(
                    det.box,
                    det.confidence,
                    expected_age(age_p),
                    GENDERS[int(gender_p.argmax())],
                    age_p,
                    gender_p,
                )
            )
        return out

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
