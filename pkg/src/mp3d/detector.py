"""FPN neck over converted 2D stage features plus a single-class dense head.

The head is anchor-based objectness + box regression (single stage; lesion
detection here is class-agnostic). 2D convolutions are realized as depth-1
instances of the 3D conv op.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import anchors as anchor_lib
from . import ops
from .anchors import AnchorConfig, TargetAssignment, assign_targets, clip_boxes, decode_boxes
from .backbone import Backbone, BackboneConfig, build_backbone
from .nn import Conv3d, Module, ModuleList, relu_flops
from .tensor import Tensor, add, concat, relu, reshape, transpose


@dataclass
class Detection:
    box: tuple   # (x1, y1, x2, y2) in input pixels
    score: float


class Conv2d(Module):
    """2D convolution on [N, C, H, W], implemented as a depth-1 conv3d."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, bias=True, rng=None):
        super().__init__()
        k = kernel if isinstance(kernel, int) else kernel[0]
        s = stride if isinstance(stride, int) else stride[0]
        p = pad if isinstance(pad, int) else pad[0]
        self.conv = Conv3d(in_channels, out_channels, (1, k, k), stride=(1, s, s),
                           pad=(0, p, p), bias=bias, rng=rng)

    def forward(self, x):
        n, c, h, w = x.shape
        out = self.conv(reshape(x, (n, c, 1, h, w)))
        _, co, _, ho, wo = out.shape
        return reshape(out, (n, co, ho, wo))

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        s = self.conv.out_shape((n, c, 1, h, w))
        return (s[0], s[1], s[3], s[4])

    def flops(self, in_shape, fpm=2):
        n, c, h, w = in_shape
        return self.conv.flops((n, c, 1, h, w), fpm)

    def param_count(self):
        return self.conv.param_count()


class FPNNeck(Module):
    """Lateral 1x1 convs, top-down nearest 2x upsampling with addition,
    3x3 smoothing convs; P6 is a stride-2 subsample of P5."""

    def __init__(self, stage_channels, out_channels=256, rng=None):
        super().__init__()
        self.out_channels = out_channels
        self.laterals = ModuleList(
            Conv2d(c, out_channels, 1, rng=rng) for c in stage_channels)
        self.smooths = ModuleList(
            Conv2d(out_channels, out_channels, 3, pad=1, rng=rng) for _ in stage_channels)

    def forward(self, feats):
        """feats: [C2, C3, C4, C5] 2D maps with doubling strides.
        Returns [P2, P3, P4, P5, P6]."""
        if len(feats) != len(self.laterals):
            raise ValueError(f"expected {len(self.laterals)} stage features, got {len(feats)}")
        lat = [conv(f) for conv, f in zip(self.laterals, feats)]
        for hi, lo in zip(lat[:-1], lat[1:]):
            if (hi.shape[2], hi.shape[3]) != (2 * lo.shape[2], 2 * lo.shape[3]):
                raise ValueError(f"stride mismatch between levels: {hi.shape} vs {lo.shape}")
        merged = [lat[-1]]
        for f in reversed(lat[:-1]):
            merged.append(add(f, ops.upsample2x_nearest(merged[-1])))
        merged.reverse()
        outs = [conv(f) for conv, f in zip(self.smooths, merged)]
        p6 = self._subsample(outs[-1])
        return outs + [p6]

    @staticmethod
    def _subsample(p5):
        n, c, h, w = p5.shape
        x5 = reshape(p5, (n, c, 1, h, w))
        pooled = ops.pool3d(x5, "max", (1, 1, 1), (1, 2, 2))
        return reshape(pooled, (n, c, h // 2, w // 2))

    def profile(self, feat_shapes, add_row, fpm):
        lat_shapes = []
        for i, (conv, shape) in enumerate(zip(self.laterals, feat_shapes)):
            add_row(f"lateral{i + 2}", conv.param_count(), conv.flops(shape, fpm))
            lat_shapes.append(conv.out_shape(shape))
        # top-down adds: one add per merge at the finer resolution
        for shape in lat_shapes[:-1]:
            add_row("topdown_add", 0, int(np.prod(shape)))
        out_shapes = []
        for i, (conv, shape) in enumerate(zip(self.smooths, lat_shapes)):
            add_row(f"smooth{i + 2}", conv.param_count(), conv.flops(shape, fpm))
            out_shapes.append(conv.out_shape(shape))
        n, c, h, w = out_shapes[-1]
        p6_shape = (n, c, h // 2, w // 2)
        add_row("subsample_p6", 0, int(np.prod(p6_shape)))
        return out_shapes + [p6_shape]


class DenseHead(Module):
    """Shared head over all pyramid levels: two 3x3 convs then 1x1
    objectness and box-delta predictors for A anchors per location."""

    def __init__(self, in_channels, anchors_per_loc, conv_channels=None, rng=None):
        super().__init__()
        ch = conv_channels if conv_channels is not None else in_channels
        self.anchors_per_loc = anchors_per_loc
        self.conv1 = Conv2d(in_channels, ch, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(ch, ch, 3, pad=1, rng=rng)
        self.cls_out = Conv2d(ch, anchors_per_loc, 1, rng=rng)
        self.reg_out = Conv2d(ch, 4 * anchors_per_loc, 1, rng=rng)
        # small predictor init: near-zero deltas and a low objectness prior
        # keep the initial loss (and its gradient norm) dominated by signal
        # rather than by the random head projection
        self.cls_out.conv.weight.data *= 0.03
        self.reg_out.conv.weight.data *= 0.03
        self.cls_out.conv.bias.data[:] = -4.0

    def forward(self, pyramid):
        """Returns (logits, deltas) flattened over all levels in anchor
        enumeration order (level, row, col, anchor)."""
        logits, deltas = [], []
        A = self.anchors_per_loc
        for p in pyramid:
            h = relu(self.conv1(p))
            h = relu(self.conv2(h))
            cls = self.cls_out(h)
            reg = self.reg_out(h)
            n, _, fh, fw = cls.shape
            logits.append(reshape(transpose(cls, (0, 2, 3, 1)), (n * fh * fw * A,)))
            reg5 = reshape(reg, (n, A, 4, fh, fw))
            deltas.append(reshape(transpose(reg5, (0, 3, 4, 1, 2)), (n * fh * fw * A, 4)))
        return concat(logits, axis=0), concat(deltas, axis=0)

    def profile(self, pyramid_shapes, add_row, fpm):
        for i, shape in enumerate(pyramid_shapes):
            h1 = self.conv1.out_shape(shape)
            add_row(f"head_conv1.p{i + 2}", 0 if i else self.conv1.param_count(),
                    self.conv1.flops(shape, fpm))
            add_row("head_relu", 0, relu_flops(h1))
            h2 = self.conv2.out_shape(h1)
            add_row(f"head_conv2.p{i + 2}", 0 if i else self.conv2.param_count(),
                    self.conv2.flops(h1, fpm))
            add_row("head_relu", 0, relu_flops(h2))
            add_row(f"head_cls.p{i + 2}", 0 if i else self.cls_out.param_count(),
                    self.cls_out.flops(h2, fpm))
            add_row(f"head_reg.p{i + 2}", 0 if i else self.reg_out.param_count(),
                    self.reg_out.flops(h2, fpm))


class Detector(Module):
    """Backbone + FPN neck + dense head; input [1, 1, D, H, W] slice stacks."""

    def __init__(self, backbone_config: BackboneConfig, anchor_config: AnchorConfig = None,
                 fpn_channels=256, head_channels=None, seed=0):
        super().__init__()
        self.backbone_config = backbone_config
        self.anchor_config = anchor_config if anchor_config is not None else AnchorConfig()
        ss = np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(3)]
        self.backbone = build_backbone(backbone_config, rng=rngs[0])
        self.neck = FPNNeck(backbone_config.stage_channels, fpn_channels, rng=rngs[1])
        self.head = DenseHead(fpn_channels, self.anchor_config.anchors_per_location,
                              conv_channels=head_channels, rng=rngs[2])

    def forward(self, x):
        feats = self.backbone(x)
        pyramid = self.neck(feats)
        return self.head(pyramid)

    def image_anchors(self, image_hw):
        levels = anchor_lib.generate_anchors(self.anchor_config, image_hw)
        return np.concatenate(levels, axis=0)

    def profile(self, input_shape, add_row, fpm):
        feat_shapes = self.backbone.profile(input_shape, add_row, fpm)
        pyr_shapes = self.neck.profile(feat_shapes, add_row, fpm)
        self.head.profile(pyr_shapes, add_row, fpm)


def detection_loss(logits, deltas, assignment: TargetAssignment, rng,
                   batch_size=256, pos_fraction=0.5):
    """Sampled objectness + box-regression loss, weighted 1:1.

    Samples at most batch_size anchors with at most pos_fraction positives
    from the assignment, then applies weighted-mean bce on the sample and
    weighted-mean smooth-L1 on the sampled positives. Degenerate samples
    (nothing to score) contribute zero.
    """
    labels = assignment.labels
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    n_pos = min(len(pos_idx), int(batch_size * pos_fraction))
    if len(pos_idx) > n_pos:
        pos_idx = rng.choice(pos_idx, size=n_pos, replace=False)
    n_neg = min(len(neg_idx), batch_size - n_pos)
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    cls_w = np.zeros(labels.shape[0], dtype=np.float32)
    cls_w[pos_idx] = 1.0
    cls_w[neg_idx] = 1.0
    targets = (labels == 1).astype(np.float32)
    cls_loss = ops.bce_with_logits(logits, targets, weights=cls_w)
    reg_w = np.zeros((labels.shape[0], 4), dtype=np.float32)
    reg_w[pos_idx] = 1.0
    reg_loss = ops.smooth_l1(deltas, assignment.regression_targets, weights=reg_w)
    return add(cls_loss, reg_loss), float(cls_loss.item()), float(reg_loss.item())


def decode_and_nms(logits, deltas, anchors, image_hw, score_thresh=0.05,
                   nms_iou=0.5, max_dets=100):
    """Sigmoid scores, delta decoding, clipping, then greedy NMS.

    logits/deltas are plain arrays (detached head outputs)."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    scores = 1.0 / (1.0 + np.exp(-logits))
    keep = scores >= score_thresh
    if not keep.any():
        return []
    idx = np.flatnonzero(keep)
    boxes = decode_boxes(anchors[idx], deltas[idx])
    boxes = clip_boxes(boxes, image_hw)
    kept = anchor_lib.nms(boxes, scores[idx], iou_thresh=nms_iou, max_dets=max_dets)
    return [Detection(box=tuple(float(v) for v in boxes[k]), score=float(scores[idx[k]]))
            for k in kept]
