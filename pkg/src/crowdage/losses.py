"""The training objective: masked age and gender losses plus the total.

Each decoded prediction slot (b, k) enters the age/gender sums only when its
box overlaps some ground-truth face above the IOU threshold and that face
carries the relevant label; sums are divided by the number of surviving
terms. Excluded slots are never touched, so their gradients are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .age_estimator import AGE_CLASSES
from .geometry import BBox, Detection, match_predictions

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_size: float = 0.1
    lambda_off: float = 1.0
    lambda_mean: float = 0.01
    lambda_var: float = 0.0025
    lambda_ce: float = 0.05
    lambda_gen: float = 0.1
    th_iou: float = 0.3

    def __post_init__(self):
        for name in (
            "lambda_size",
            "lambda_off",
            "lambda_mean",
            "lambda_var",
            "lambda_ce",
            "lambda_gen",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.th_iou < 1.0):
            raise ValueError(f"th_iou {self.th_iou} outside [0, 1)")


@dataclass
class AgeSupervisionBatch:
    """Per-slot predictions plus per-image ground truth for the masked losses.

    ``age_probs`` is (B, K, 101) and ``gender_probs`` (B, K, 2); the outer
    lists run over the batch, each holding that image's K predicted boxes and
    its ground-truth faces. Missing labels are ``None`` (gender: 0 female,
    1 male).
    """

    age_probs: torch.Tensor
    gender_probs: torch.Tensor
    pred_boxes: list[Sequence[Detection]]
    gt_boxes: list[Sequence[BBox]]
    gt_ages: list[Sequence[Optional[int]]]
    gt_genders: list[Sequence[Optional[int]]]

    def __post_init__(self):
        b, k = self.age_probs.shape[:2]
        if len(self.pred_boxes) != b or any(len(p) != k for p in self.pred_boxes):
            raise ValueError("pred_boxes must be B lists of K detections")
        if not (len(self.gt_boxes) == len(self.gt_ages) == len(self.gt_genders) == b):
            raise ValueError("ground-truth lists must have batch length")


def mean_variance_loss(probs, y) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance penalties of an age distribution against label y.

    The mean term is half the squared error of the distribution's expected
    age; the variance term is the distribution's own variance. Accepts a
    single (101,) vector or a batch (..., 101) with matching y.
    """
    p = torch.as_tensor(probs, dtype=torch.get_default_dtype() if not torch.is_tensor(probs) else None)
    y_t = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    ages = torch.arange(AGE_CLASSES, dtype=p.dtype, device=p.device)
    m = (p * ages).sum(dim=-1)
    l_mean = 0.5 * (m - y_t) ** 2
    l_var = (p * (ages - m.unsqueeze(-1)) ** 2).sum(dim=-1)
    return l_mean, l_var


def cross_entropy_loss(probs, y) -> torch.Tensor:
    """-log p_y with the probability clamped at PROB_EPS."""
    p = torch.as_tensor(probs)
    y_t = torch.as_tensor(y, device=p.device).long()
    picked = p.gather(-1, y_t.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp(min=PROB_EPS))


def age_single_loss(probs, y, weights: LossWeights) -> torch.Tensor:
    """Weighted mean-variance plus cross-entropy age loss for one face."""
    l_mean, l_var = mean_variance_loss(probs, y)
    l_ce = cross_entropy_loss(probs, y)
    return weights.lambda_mean * l_mean + weights.lambda_var * l_var + weights.lambda_ce * l_ce


def gender_bce_loss(probs, label) -> torch.Tensor:
    """Binary cross-entropy on the true-class probability of a 2-way softmax."""
    return cross_entropy_loss(probs, label)


def _selected_slots(sup: AgeSupervisionBatch, th_iou: float, labels_per_image):
    """Indices (b, k) surviving the IOU mask whose matched face has a label."""
    sel_b, sel_k, sel_y = [], [], []
    for b, (preds, gts, labels) in enumerate(
        zip(sup.pred_boxes, sup.gt_boxes, labels_per_image)
    ):
        for m in match_predictions(preds, gts, th_iou):
            if not m.included:
                continue
            label = labels[m.matched_gt_index]
            if label is None:
                continue
            sel_b.append(b)
            sel_k.append(m.pred_index)
            sel_y.append(int(label))
    return sel_b, sel_k, sel_y


def masked_age_loss(sup: AgeSupervisionBatch, weights: LossWeights) -> torch.Tensor:
    """Sum of per-face age losses over unmasked slots, divided by their count.

    Slots masked by IOU or missing age labels contribute nothing and receive
    no gradient; an all-masked batch yields exactly zero.
    """
    sel_b, sel_k, sel_y = _selected_slots(sup, weights.th_iou, sup.gt_ages)
    if not sel_b:
        return sup.age_probs.new_zeros(())
    picked = sup.age_probs[sel_b, sel_k]
    y = torch.as_tensor(sel_y, device=picked.device)
    return age_single_loss(picked, y, weights).sum() / len(sel_b)


def masked_gender_loss(sup: AgeSupervisionBatch, weights: LossWeights) -> torch.Tensor:
    """Gender analog of masked_age_loss, weighted by lambda_gen."""
    sel_b, sel_k, sel_y = _selected_slots(sup, weights.th_iou, sup.gt_genders)
    if not sel_b:
        return sup.gender_probs.new_zeros(())
    picked = sup.gender_probs[sel_b, sel_k]
    y = torch.as_tensor(sel_y, device=picked.device)
    return weights.lambda_gen * gender_bce_loss(picked, y).sum() / len(sel_b)


def total_loss(l_det, l_age, l_gen) -> torch.Tensor:
    """L = L_det + L_age + L_gen."""
    terms = [torch.as_tensor(t) for t in (l_det, l_age, l_gen)]
    for name, t in zip(("l_det", "l_age", "l_gen"), terms):
        if not torch.isfinite(t).all():
            raise ValueError(f"{name} is not finite: {t}")
    return terms[0] + terms[1] + terms[2]
