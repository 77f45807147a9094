"""Anchor generation, IoU, target assignment, box coding, and NMS.

Boxes are (x1, y1, x2, y2) in input-pixel coordinates. Anchors live on a
five-level pyramid, one scale per level, area-preserving aspect ratios.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AnchorConfig:
    scales_per_level: tuple = (16, 32, 64, 128, 256)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    strides: tuple = (4, 8, 16, 32, 64)

    def __post_init__(self):
        if len(self.scales_per_level) != len(self.strides):
            raise ValueError("one scale per pyramid level is required")

    @property
    def anchors_per_location(self):
        return len(self.aspect_ratios)


def generate_level_anchors(scale, ratios, stride, feat_h, feat_w):
    """Anchors for one level, ordered (row, col, ratio); shape [H*W*A, 4].

    Aspect ratio r gives width = scale/sqrt(r), height = scale*sqrt(r),
    preserving the scale^2 area.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    ws = scale / np.sqrt(ratios)
    hs = scale * np.sqrt(ratios)
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    cyg, cxg = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxg, cyg], axis=-1).reshape(-1, 1, 2)
    half = np.stack([ws, hs], axis=-1) / 2.0
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4).astype(np.float32)


def generate_anchors(config: AnchorConfig, image_hw):
    """Per-level anchor arrays for an image of size (H, W).

    H and W must be divisible by the coarsest stride.
    """
    H, W = image_hw
    coarsest = max(config.strides)
    if H % coarsest or W % coarsest:
        raise ValueError(f"image size {image_hw} not divisible by coarsest stride {coarsest}")
    levels = []
    for scale, stride in zip(config.scales_per_level, config.strides):
        levels.append(generate_level_anchors(scale, config.aspect_ratios, stride,
                                             H // stride, W // stride))
    return levels


def iou_matrix(a, b):
    """Pairwise IoU of [Na,4] vs [Nb,4]; degenerate boxes give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(anchors, boxes):
    """Log-space deltas (dx, dy, dw, dh) taking anchors onto boxes."""
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + bw / 2
    bcy = boxes[:, 1] + bh / 2
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=1).astype(np.float32)


def decode_boxes(anchors, deltas):
    """Inverse of encode_boxes."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1).astype(np.float32)


def clip_boxes(boxes, image_hw):
    H, W = image_hw
    out = np.asarray(boxes, dtype=np.float32).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, W)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, H)
    return out


@dataclass
class TargetAssignment:
    """Per-anchor label in {1: positive, 0: negative, -1: ignore} plus
    regression targets for the positives."""
    labels: np.ndarray
    regression_targets: np.ndarray  # [num_anchors, 4], valid where labels == 1
    matched_gt: np.ndarray          # index of the matched GT, -1 elsewhere


def assign_targets(anchors, gt_boxes, iou_pos=0.7, iou_neg=0.3):
    """Standard RPN rule: IoU >= iou_pos positive, < iou_neg negative,
    in-between ignore; each GT's best anchor is forced positive."""
    anchors = np.asarray(anchors, dtype=np.float32).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float32).reshape(-1, 4)
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float32)
    if gt_boxes.shape[0] == 0:
        return TargetAssignment(labels, targets, matched)
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= iou_pos] = 1
    labels[(best_iou >= iou_neg) & (best_iou < iou_pos)] = -1
    # forced match: every GT claims its max-IoU anchors (ties included)
    gt_best = ious.max(axis=0)
    for j in range(gt_boxes.shape[0]):
        if gt_best[j] > 0:
            forced = np.where(ious[:, j] == gt_best[j])[0]
            labels[forced] = 1
            best_gt[forced] = j
    pos = labels == 1
    matched[pos] = best_gt[pos]
    if pos.any():
        targets[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]])
    return TargetAssignment(labels, targets, matched)


def nms(boxes, scores, iou_thresh=0.5, max_dets=None):
    """Greedy score-descending NMS; returns kept indices (score ties broken
    by lower index, making the result order-independent for equal scores)."""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float32).ravel()
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    alive = np.ones(len(scores), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        if max_dets is not None and len(keep) >= max_dets:
            break
        rest = order[alive[order]]
        if len(rest):
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            alive[rest[ious > iou_thresh]] = False
            alive[i] = False
    return keep
