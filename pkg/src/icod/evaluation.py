"""VOC-style AP/mAP, the counterfactual bias-reliance probe, forgetting
reports, and instance-level feature export with a 2D PCA projection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

log = logging.getLogger(__name__)

FEATURE_KINDS = ("F", "F_c", "F_b")


def iou(box_a, box_b):
    """Intersection over union; degenerate boxes contribute zero overlap."""
    ix1, iy1 = max(box_a[0], box_b[0]), max(box_a[1], box_b[1])
    ix2, iy2 = min(box_a[2], box_b[2]), min(box_a[3], box_b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, box_a[2] - box_a[0]) * max(0.0, box_a[3] - box_a[1])
    area_b = max(0.0, box_b[2] - box_b[0]) * max(0.0, box_b[3] - box_b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


@dataclass
class EvalReport:
    per_class_ap: dict  # class_id -> AP
    map_score: float
    n_images: int
    iou_thresh: float
    split: str = ""
    excluded_classes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map": self.map_score,
            "n_images": self.n_images,
            "iou_thresh": self.iou_thresh,
            "split": self.split,
            "excluded_classes": list(self.excluded_classes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
            map_score=d["map"],
            n_images=d["n_images"],
            iou_thresh=d["iou_thresh"],
            split=d.get("split", ""),
            excluded_classes=d.get("excluded_classes", []),
        )


def average_precision(dets, gts, class_id, iou_thresh=0.5):
    """All-points interpolated AP for one class over a list of images.

    dets: per image, [(box, class_id, score)]; gts: per image, [(class_id, box)].
    Greedy score-descending matching, each ground truth used at most once.
    """
    records = []  # (score, image index, box)
    n_gt = 0
    gt_boxes = []
    for img_idx, anns in enumerate(gts):
        boxes = [box for c, box in anns if c == class_id]
        gt_boxes.append(boxes)
        n_gt += len(boxes)
    for img_idx, img_dets in enumerate(dets):
        for box, c, score in img_dets:
            if c == class_id:
                records.append((score, img_idx, box))
    if n_gt == 0:
        return 0.0
    if not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    matched = [set() for _ in gts]
    tps = []
    for score, img_idx, box in records:
        best_iou, best_g = 0.0, None
        for g, gt_box in enumerate(gt_boxes[img_idx]):
            if g in matched[img_idx]:
                continue
            overlap = iou(box, gt_box)
            if overlap > best_iou:
                best_iou, best_g = overlap, g
        if best_g is not None and best_iou >= iou_thresh:
            matched[img_idx].add(best_g)
            tps.append(1)
        else:
            tps.append(0)
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum([1 - t for t in tps])
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # area under the precision envelope
    m_rec = np.concatenate([[0.0], recall, [recall[-1]]])
    m_pre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(m_pre) - 2, -1, -1):
        m_pre[i] = max(m_pre[i], m_pre[i + 1])
    idx = np.nonzero(m_rec[1:] != m_rec[:-1])[0]
    return float(np.sum((m_rec[idx + 1] - m_rec[idx]) * m_pre[idx + 1]))


def mean_ap(dets, gts, class_ids, iou_thresh=0.5, split=""):
    """Per-class AP and their mean; classes with neither ground truth nor
    detections are excluded from the mean (logged), not counted as 1.0."""
    if not class_ids:
        raise ConfigError("mean_ap needs at least one class")
    per_class = {}
    excluded = []
    for c in class_ids:
        has_gt = any(cc == c for anns in gts for cc, _ in anns)
        has_det = any(cc == c for img in dets for _, cc, _ in img)
        if not has_gt and not has_det:
            excluded.append(c)
            log.warning("class %s has no ground truth and no detections; excluded from mAP", c)
            continue
        per_class[c] = average_precision(dets, gts, c, iou_thresh)
    map_score = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(
        per_class_ap=per_class,
        map_score=map_score,
        n_images=len(gts),
        iou_thresh=iou_thresh,
        split=split,
        excluded_classes=excluded,
    )


def evaluate_model(model, dataset, class_remap=None, iou_thresh=0.5, score_thresh=0.3, nms_iou=0.5, split=""):
    """Run detection over a dataset and score it; class_remap maps global
    dataset class ids to the model's head indices."""
    if class_remap is None:
        class_remap = {c: i for i, c in enumerate(sorted(dataset.task.class_ids))}
    dets, gts = [], []
    for sample in dataset.samples():
        dets.append(model.detect(sample.image, score_thresh=score_thresh, nms_iou=nms_iou))
        gts.append([(class_remap[c], box) for c, box in sample.annotations if c in class_remap])
    class_ids = sorted(class_remap[c] for c in dataset.task.class_ids if c in class_remap)
    return mean_ap(dets, gts, class_ids, iou_thresh, split=split)


def bias_reliance(model, dataset, **eval_kwargs):
    """mAP drop when every scene's bias attribute is counterfactually shifted."""
    if len(set(dataset.task.class_ids)) < 2:
        raise ConfigError("bias_reliance needs at least two classes")
    straight = evaluate_model(model, dataset, split="original", **eval_kwargs)
    flipped = evaluate_model(model, dataset.flipped(), split="bias_flipped", **eval_kwargs)
    return straight.map_score - flipped.map_score


def forgetting_report(report_before, report_after, old_classes, new_classes=()):
    """Per-class deltas on old classes, retention ratio, and new-task mAP."""
    missing = [c for c in old_classes if c not in report_before.per_class_ap]
    if missing:
        raise ConfigError(f"old classes {missing} absent from the before-report")
    deltas = {}
    for c in old_classes:
        before = report_before.per_class_ap[c]
        after = report_after.per_class_ap.get(c, 0.0)
        deltas[c] = after - before
    old_before = float(np.mean([report_before.per_class_ap[c] for c in old_classes]))
    old_after = float(np.mean([report_after.per_class_ap.get(c, 0.0) for c in old_classes]))
    new_aps = {c: report_after.per_class_ap.get(c, 0.0) for c in new_classes}
    return {
        "old_class_deltas": deltas,
        "old_map_before": old_before,
        "old_map_after": old_after,
        "retention": old_after / old_before if old_before > 0 else 0.0,
        "new_classes": sorted(new_classes),
        "new_map": float(np.mean(list(new_aps.values()))) if new_aps else None,
        "new_per_class_ap": new_aps,
    }


@dataclass
class FeatureTable:
    rows: list  # (class_id, kind, np vector of length C)
    meta: dict

    def vectors(self, kind):
        sel = [(c, v) for c, k, v in self.rows if k == kind]
        if not sel:
            return np.zeros((0, 0)), []
        return np.stack([v for _, v in sel]), [c for c, _ in sel]


def export_instance_features(model, dataset, k_per_class, kinds=FEATURE_KINDS, seed=0, class_remap=None):
    """Average-pooled per-instance feature vectors for each requested kind.

    Ground-truth boxes are projected onto the feature grid and the cells fully
    inside the box are pooled (falling back to the box's center cell when no
    cell fits) — interior cells are object-dominated, whereas cells merely
    touched by the box are mostly background and wash out class structure. The
    causal kind uses analysis mode (r fixed to 1). Samples k per class with a
    seeded draw; classes with fewer instances keep all and record a shortfall.
    """
    if k_per_class < 1:
        raise ConfigError(f"k_per_class must be >= 1, got {k_per_class}")
    for kind in kinds:
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {kind!r}")
    stride = model.stride
    per_class = {}  # class -> list of {kind: vector}
    with torch.no_grad():
        for sample in dataset.samples():
            x = torch.as_tensor(sample.image, dtype=torch.float32)[None]
            feat = model.features(x)
            f_b, f_c = model.decompose(feat)
            maps = {"F": feat[0], "F_b": f_b[0], "F_c": f_c[0]}
            gh, gw = feat.shape[-2:]
            for class_id, (x1, y1, x2, y2) in sample.annotations:
                gx1 = int(math.ceil(x1 / stride))
                gy1 = int(math.ceil(y1 / stride))
                gx2 = min(int(x2 // stride), gw)
                gy2 = min(int(y2 // stride), gh)
                if gx2 <= gx1 or gy2 <= gy1:
                    cx = min(int((x1 + x2) / 2 // stride), gw - 1)
                    cy = min(int((y1 + y2) / 2 // stride), gh - 1)
                    gx1, gy1, gx2, gy2 = cx, cy, cx + 1, cy + 1
                entry = {
                    kind: maps[kind][:, gy1:gy2, gx1:gx2].mean(dim=(1, 2)).numpy().astype(np.float64)
                    for kind in kinds
                }
                if class_remap is not None:
                    class_id = class_remap[class_id]
                per_class.setdefault(class_id, []).append(entry)
    rng = np.random.default_rng(seed)
    rows = []
    shortfall = {}
    for class_id in sorted(per_class):
        entries = per_class[class_id]
        if len(entries) > k_per_class:
            picked = sorted(rng.choice(len(entries), size=k_per_class, replace=False))
        else:
            picked = range(len(entries))
            if len(entries) < k_per_class:
                shortfall[class_id] = k_per_class - len(entries)
        for i in picked:
            for kind in kinds:
                rows.append((class_id, kind, entries[i][kind]))
    return FeatureTable(rows=rows, meta={"k_per_class": k_per_class, "seed": seed, "shortfall": shortfall})


def pca_2d(vectors, class_ids):
    """Project rows onto the top-2 principal components.

    Sign convention: each component's largest-magnitude loading is positive.
    Zero-variance input maps everything to the origin.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ConfigError("pca_2d needs at least 2 rows and 2 dims")
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        return [(c, 0.0, 0.0) for c in class_ids]
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for k in range(2):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    proj = centered @ comps.T
    return [(c, float(px), float(py)) for c, (px, py) in zip(class_ids, proj)]


def class_silhouette(table, kind, metric="cosine"):
    """Mean silhouette of one feature kind's vectors under their class labels.

    Cosine distance by default: the bias and causal kinds live at very
    different scales, and cluster shape rather than vector norm is what the
    comparison is about.
    """
    from sklearn.metrics import silhouette_score

    vectors, labels = table.vectors(kind)
    if len(set(labels)) < 2:
        raise ConfigError("silhouette needs at least two classes")
    return float(silhouette_score(vectors, labels, metric=metric))
