"""Age/gender sub-network over face crops, expectation decoding, age groups.

The backbone is a plain residual CNN whose stride-16 stage optionally fuses
an externally sampled detector feature patch by channel concatenation; the
block producing that stage is narrowed by the patch width so the fused model
never has more parameters than the baseline.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn

from .blocks import ConvBNReLU, ResidualBlock, residual_stage

AGE_CLASSES = 101
AGE_GROUP_UPPER = (2, 7, 12, 19, 36, 65)
AGE_GROUP_LABELS = ("0-2", "3-7", "8-12", "13-19", "20-36", "37-65", "66+")
N_AGE_GROUPS = 7

# Block counts and width factor of the lightweight published backbone this
# model's paper-scale preset mirrors; replicating its internals is out of scope.
TRESNET_S_BLOCKS = (3, 3, 7, 3)
TRESNET_S_WIDTH_FACTOR = 0.9


def expected_age(probs):
    """Probability-weighted average age of a 101-way distribution.

    Accepts a single distribution or a batch (..., 101). Array input yields a
    float (or an array over the leading dims); tensor input stays a tensor so
    the decoding remains differentiable.
    """
    if isinstance(probs, torch.Tensor):
        ages = torch.arange(AGE_CLASSES, dtype=probs.dtype, device=probs.device)
        return (probs * ages).sum(dim=-1)
    arr = np.asarray(probs, dtype=np.float64)
    out = (arr * np.arange(AGE_CLASSES)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def to_age_group(age: float) -> int:
    """Map an age in years to its group index, flooring fractional ages."""
    if age < 0:
        raise ValueError(f"age {age} must be >= 0")
    years = int(age)
    for idx, upper in enumerate(AGE_GROUP_UPPER):
        if years <= upper:
            return idx
    return N_AGE_GROUPS - 1


class AgeEstimator(nn.Module):
    """Residual CNN over face crops with two softmax heads (101-way age, 2-way gender).

    With ``use_roi_feature`` the first stride-16 block's output is narrowed by
    ``branch_channels`` and the sampled detector patch is concatenated there,
    restoring the full stage width. Each head is a 1x1 convolution, global
    average pooling, dropout, and a fully-connected layer with softmax.
    """

    def __init__(
        self,
        widths: tuple[int, int, int, int] = (58, 115, 230, 461),
        blocks: tuple[int, int, int, int] = TRESNET_S_BLOCKS,
        branch_channels: int = 48,
        use_roi_feature: bool = True,
        dropout: float = 0.2,
    ):
        super().__init__()
        self.use_roi_feature = use_roi_feature
        self.branch_channels = branch_channels
        fusion_width = widths[2] - (branch_channels if use_roi_feature else 0)
        if fusion_width <= 0:
            raise ValueError(
                f"stage width {widths[2]} must exceed branch channels {branch_channels}"
            )
        self.stem = ConvBNReLU(3, widths[0], stride=2)
        self.stage1 = residual_stage(widths[0], widths[0], blocks[0], stride=2)
        self.stage2 = residual_stage(widths[0], widths[1], blocks[1], stride=2)
        # the block whose output first reaches 1/16 scale; fusion happens on it
        self.stage3_down = ResidualBlock(widths[1], fusion_width, stride=2)
        if blocks[2] > 1:
            self.stage3_rest = residual_stage(widths[2], widths[2], blocks[2] - 1, stride=1)
        else:
            self.stage3_rest = nn.Identity()
        self.stage4 = residual_stage(widths[2], widths[3], blocks[3], stride=2)
        self.head_age_conv = nn.Conv2d(widths[3], widths[3], 1)
        self.head_gender_conv = nn.Conv2d(widths[3], widths[3], 1)
        self.dropout = nn.Dropout(dropout)
        self.fc_age = nn.Linear(widths[3], AGE_CLASSES)
        self.fc_gender = nn.Linear(widths[3], 2)

    def forward(
        self, crops: torch.Tensor, roi_feature: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Crops (N, 3, H, W) -> age probs (N, 101), gender probs (N, 2)."""
        x = self.stem(crops)
        x = self.stage1(x)
        x = self.stage2(x)
        x = self.stage3_down(x)
        if self.use_roi_feature:
            if roi_feature is None:
                raise ValueError("intermediate-feature connection enabled but no roi_feature given")
            if roi_feature.shape[1] != self.branch_channels or roi_feature.shape[2:] != x.shape[2:]:
                raise ValueError(
                    f"roi_feature shape {tuple(roi_feature.shape[1:])} does not match "
                    f"fusion stage ({self.branch_channels}, {x.shape[2]}, {x.shape[3]})"
                )
            x = torch.cat([x, roi_feature], dim=1)
        elif roi_feature is not None:
            raise ValueError("roi_feature given but the connection is disabled")
        x = self.stage3_rest(x)
        x = self.stage4(x)

        age = self.dropout(self.head_age_conv(x).mean(dim=(2, 3)))
        gender = self.dropout(self.head_gender_conv(x).mean(dim=(2, 3)))
        return (
            torch.softmax(self.fc_age(age), dim=-1),
            torch.softmax(self.fc_gender(gender), dim=-1),
        )
