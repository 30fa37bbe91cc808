"""Training objectives: pixel, task-driven perceptual, and task losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nets import CLASSIFICATION, SEGMENTATION, ParamSet, feat_forward
from .tensor import Tensor

ON_TRAINING_ALTERNATE = "on_training_alternate"
ON_TRAINING_JOINT = "on_training_joint"
PRETRAINED_TASK = "pretrained_task"
PRETRAINED_GENERIC = "pretrained_generic"
NONE = "none"
PERCEPTUAL_KINDS = (ON_TRAINING_ALTERNATE, ON_TRAINING_JOINT, PRETRAINED_TASK, PRETRAINED_GENERIC, NONE)


@dataclass
class PerceptualSource:
    """Which feature extractor the perceptual term is measured in.

    ``pretrained_*`` kinds carry their own frozen snapshot; the on-training
    kinds borrow the live extractor at call time.
    """

    kind: str = ON_TRAINING_ALTERNATE
    frozen_params: ParamSet | None = None

    def __post_init__(self):
        if self.kind not in PERCEPTUAL_KINDS:
            raise ValueError(f"unknown perceptual source {self.kind!r}")
        if self.kind in (PRETRAINED_TASK, PRETRAINED_GENERIC):
            if self.frozen_params is not None and not self.frozen_params.frozen:
                raise ValueError("pretrained perceptual extractor must be frozen")
        elif self.frozen_params is not None:
            raise ValueError(f"{self.kind} uses the live extractor, not a snapshot")


def pixel_loss(sr: Tensor, hr) -> Tensor:
    return T.l1_loss(sr, hr if isinstance(hr, Tensor) else Tensor(hr))


def tdp_loss(feat_params: ParamSet, sr: Tensor, hr, stages: int | None = None) -> Tensor:
    """Mean l1 distance between extractor features of SR and HR images.

    The extractor must be frozen. The HR branch is evaluated without
    recording, so the only gradient path is through ``sr``. ``stages``
    picks an intermediate feature map (default: the final one).
    """
    if not feat_params.frozen:
        raise ValueError("tdp_loss needs a frozen feature extractor")
    hr_t = hr if isinstance(hr, Tensor) else Tensor(hr)
    if sr.shape != hr_t.shape:
        raise ValueError(f"tdp_loss shape mismatch: {sr.shape} vs {hr_t.shape}")
    with T.no_grad():
        target = feat_forward(feat_params, hr_t.detach(), stages)
    return T.l1_loss(feat_forward(feat_params, sr, stages), target)


def task_loss(pred: Tensor, labels, task_kind: str = CLASSIFICATION) -> Tensor:
    labels = np.asarray(labels)
    if task_kind == CLASSIFICATION and pred.data.ndim != 2:
        raise ValueError("classification expects [B,C] logits")
    if task_kind == SEGMENTATION and pred.data.ndim != 4:
        raise ValueError("segmentation expects [B,C,H,W] logits")
    return T.softmax_cross_entropy(pred, labels)


def perceptual_from_source(src: PerceptualSource, live_feat: ParamSet, sr: Tensor, hr,
                           stages: int | None = None) -> Tensor:
    if src.kind == NONE:
        return Tensor(0.0)
    if src.kind in (PRETRAINED_TASK, PRETRAINED_GENERIC):
        if src.frozen_params is None:
            raise ValueError(f"perceptual source {src.kind} has no snapshot")
        return tdp_loss(src.frozen_params, sr, hr, stages)
    if src.kind == ON_TRAINING_ALTERNATE:
        return tdp_loss(live_feat, sr, hr, stages)
    # joint: gradients reach the live extractor through both branches
    if live_feat.frozen:
        raise ValueError("on_training_joint needs a trainable extractor")
    hr_t = hr if isinstance(hr, Tensor) else Tensor(hr)
    return T.l1_loss(feat_forward(live_feat, sr, stages), feat_forward(live_feat, hr_t, stages))
