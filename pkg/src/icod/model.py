"""Full model: backbone + feature decomposer + shared detection head."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import decomposer as dec
from .detector import Backbone, Head, assign_targets, decode
from .errors import ConfigError


class IcodModel(nn.Module):
    """One backbone, one decomposer, one head shared by the F / F_c / F_b passes.

    theta_m = backbone + head parameters; theta_c = decomposer parameters.

    inference_kind selects the feature map the forward/detect path runs on:
    "F" (plain backbone output) or "F_c" (causal feature, analysis-mode r).
    ICOD training switches it to "F_c" — the causal feature is the model's
    debiased representation and its detection path is trained via L_d(F_c).
    """

    def __init__(self, n_classes, backbone_channels=(16, 32, 32), decomposer_hidden=None):
        super().__init__()
        self.n_classes = n_classes
        self.backbone = Backbone(backbone_channels)
        self.decomposer = dec.Decomposer(self.backbone.out_channels, decomposer_hidden)
        self.head = Head(self.backbone.out_channels, n_classes)
        self.inference_kind = "F"

    @property
    def stride(self):
        return self.backbone.stride

    @property
    def feature_channels(self):
        return self.backbone.out_channels

    def detector_parameters(self):
        """theta_m."""
        return list(self.backbone.parameters()) + list(self.head.parameters())

    def decomposer_parameters(self):
        """theta_c."""
        return list(self.decomposer.parameters())

    def features(self, images):
        return self.backbone(images)

    def decompose(self, feat, r=None):
        """(F_b, F_c) for a given feature map; r defaults to analysis mode (ones)."""
        w = self.decomposer.channel_weight(feat)
        b = self.decomposer.channel_bias(feat)
        f_b = dec.bias_feature(feat, w, b)
        if r is None:
            r = dec.sample_r(None, self.feature_channels, analysis_mode="ones")
        return f_b, dec.causal_feature(feat, f_b, r)

    def forward(self, images):
        feat = self.backbone(images)
        if self.inference_kind == "F_c":
            _, feat = self.decompose(feat)
        elif self.inference_kind != "F":
            raise ConfigError(f"unknown inference_kind {self.inference_kind!r}")
        return self.head(feat)

    @torch.no_grad()
    def detect(self, image, score_thresh=0.5, nms_iou=0.5):
        """Single image (3,H,W) array or tensor -> [(box, class_id, score)]."""
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32)[None]
        raw = self.forward(x)[0]
        return decode(raw, self.stride, self.n_classes, score_thresh, nms_iou)


def prepare_batches(dataset, stride, n_classes, class_remap=None):
    """Pre-render a dataset into (images tensor, per-image TargetMap list).

    class_remap maps global class ids to head output indices; annotations for
    unmapped classes are dropped (old-task objects unlabeled in new-task data).
    """
    images, targets = [], []
    grid = None
    for sample in dataset.samples():
        img = torch.as_tensor(sample.image, dtype=torch.float32)
        if grid is None:
            grid = (img.shape[-2] // stride, img.shape[-1] // stride)
        anns = sample.annotations
        if class_remap is not None:
            anns = [(class_remap[c], box) for c, box in anns if c in class_remap]
        images.append(img)
        targets.append(assign_targets(anns, grid, stride, n_classes))
    return torch.stack(images), targets
