"""Minimal single-stage detector: small conv backbone plus a dense 1x1 head.

The head predicts, per grid cell, (n_classes + 1) class logits (background is
the last index) and 4 box deltas. Targets use center-cell assignment: the cell
containing a box center is positive; collisions go to the larger box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as nnf

from .errors import ConfigError, DivergenceError


@dataclass
class FeatureMap:
    data: torch.Tensor  # (C, H', W') or (B, C, H', W')
    stride: int


@dataclass
class TargetMap:
    classes: torch.Tensor  # (H', W') long, background = n_classes
    deltas: torch.Tensor  # (4, H', W') float: dx, dy, log w, log h
    positive: torch.Tensor  # (H', W') bool


class Backbone(nn.Module):
    """Stack of stride-2 conv blocks; total stride 2**len(channels)."""

    def __init__(self, channels=(16, 32, 32), in_channels=3, kernel_size=5):
        super().__init__()
        layers = []
        prev = in_channels
        for c in channels:
            layers += [
                nn.Conv2d(prev, c, kernel_size, stride=2, padding=kernel_size // 2),
                nn.ReLU(inplace=True),
            ]
            prev = c
        self.blocks = nn.Sequential(*layers)
        self.out_channels = prev
        self.stride = 2 ** len(channels)

    def forward(self, x):
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ConfigError(f"input dims {tuple(x.shape[-2:])} not divisible by stride {self.stride}")
        return self.blocks(x)


class Head(nn.Module):
    """1x1 conv emitting (n_classes + 1) class logits and 4 box deltas per cell."""

    BACKGROUND_PRIOR = 4.0  # initial background-logit bias; most cells are empty

    def __init__(self, in_channels, n_classes):
        super().__init__()
        self.n_classes = n_classes
        self.conv = nn.Conv2d(in_channels, n_classes + 5, 1)
        with torch.no_grad():
            self.conv.bias[n_classes] = self.BACKGROUND_PRIOR

    def forward(self, feat):
        if feat.shape[-3] != self.conv.in_channels:
            raise ConfigError(f"feature channels {feat.shape[-3]} != head input {self.conv.in_channels}")
        return self.conv(feat)

    def forward_detached_params(self, feat):
        """Same prediction, but gradients do not reach the head parameters."""
        return nnf.conv2d(feat, self.conv.weight.detach(), self.conv.bias.detach())


def split_raw(raw, n_classes):
    """(logits over n_classes+1, deltas) from a raw head output."""
    return raw[..., : n_classes + 1, :, :], raw[..., n_classes + 1 :, :, :]


def assign_targets(annotations, grid_shape, stride, n_classes):
    gh, gw = grid_shape
    classes = torch.full((gh, gw), n_classes, dtype=torch.long)
    deltas = torch.zeros((4, gh, gw))
    positive = torch.zeros((gh, gw), dtype=torch.bool)
    areas = torch.zeros((gh, gw))
    for class_id, (x1, y1, x2, y2) in annotations:
        if class_id >= n_classes:
            raise ConfigError(f"class_id {class_id} >= n_classes {n_classes}")
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        j, i = int(cx // stride), int(cy // stride)
        if not (0 <= i < gh and 0 <= j < gw):
            raise ConfigError(f"box center ({cx:.1f},{cy:.1f}) outside grid {grid_shape}")
        area = (x2 - x1) * (y2 - y1)
        if positive[i, j] and areas[i, j] >= area:
            continue
        areas[i, j] = area
        positive[i, j] = True
        classes[i, j] = class_id
        deltas[0, i, j] = cx / stride - j
        deltas[1, i, j] = cy / stride - i
        deltas[2, i, j] = math.log((x2 - x1) / stride)
        deltas[3, i, j] = math.log((y2 - y1) / stride)
    return TargetMap(classes=classes, deltas=deltas, positive=positive)


def stack_targets(targets):
    return TargetMap(
        classes=torch.stack([t.classes for t in targets]),
        deltas=torch.stack([t.deltas for t in targets]),
        positive=torch.stack([t.positive for t in targets]),
    )


def smooth_l1(x):
    """0.5 x^2 inside |x|<1, |x|-0.5 outside."""
    x = torch.as_tensor(x)
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def detection_loss(raw, targets, n_classes):
    """(L_cls, L_reg, L_d). Cross-entropy over all cells; SmoothL1 over positives."""
    if not torch.isfinite(raw).all():
        raise DivergenceError("non-finite head output")
    logits, deltas = split_raw(raw, n_classes)
    if raw.dim() == 3:
        logits, deltas = logits[None], deltas[None]
        cls_t, delta_t, pos = targets.classes[None], targets.deltas[None], targets.positive[None]
    else:
        cls_t, delta_t, pos = targets.classes, targets.deltas, targets.positive
    l_cls = nnf.cross_entropy(logits, cls_t)
    if pos.any():
        mask = pos[:, None].expand_as(deltas)
        l_reg = smooth_l1(deltas[mask] - delta_t[mask]).mean()
    else:
        l_reg = torch.zeros((), device=raw.device)
    return l_cls, l_reg, l_cls + l_reg


def _iou_single(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, iou_thresh):
    """Greedy NMS; returns kept indices, score-descending, index tie-break."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_iou_single(boxes[i], boxes[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return kept


def decode(raw, stride, n_classes, score_thresh=0.5, nms_iou=0.5):
    """Raw single-image head output -> [(box, class_id, score)] sorted by score."""
    if raw.dim() != 3:
        raise ConfigError("decode expects a single image's raw output")
    logits, deltas = split_raw(raw, n_classes)
    probs = torch.softmax(logits, dim=0)
    gh, gw = logits.shape[-2:]
    cand = []
    for i in range(gh):
        for j in range(gw):
            class_probs = probs[:n_classes, i, j]
            c = int(class_probs.argmax())
            score = float(class_probs[c])
            if score < score_thresh:
                continue
            dx, dy, dw, dh = (float(v) for v in deltas[:, i, j])
            cx, cy = (j + dx) * stride, (i + dy) * stride
            w, h = math.exp(dw) * stride, math.exp(dh) * stride
            cand.append(((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), c, score))
    out = []
    for c in sorted({cl for _, cl, _ in cand}):
        boxes = [b for b, cl, _ in cand if cl == c]
        scores = [s for _, cl, s in cand if cl == c]
        for k in nms(boxes, scores, nms_iou):
            out.append((boxes[k], c, scores[k]))
    out.sort(key=lambda d: -d[2])
    return out
