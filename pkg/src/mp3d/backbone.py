"""Pseudo-3D residual backbones and 3D-to-2D conversion modules.

Two backbone families share one builder: the separable variant factors
every 3x3x3 kernel into a 1x3x3 in-plane conv followed by a 3x1x1
inter-slice conv; the full-3D comparison variant keeps the dense 3x3x3
kernel. Downsampling strides sit on the first 1x1x1 conv of each
transition block (original bottleneck placement). Under the anisotropic
pooling policy no layer ever strides or crops the slice axis, so every
stage output keeps the input slice count and no backbone parameter shape
depends on it.

Conversion to 2D happens once per stage output: either a grouped 1x1
convolution mixing all depth positions of a channel (learned), or a
center-slice crop (the weaker baseline).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Conv3d, Module, ModuleList, Pool3d, SliceGroupNorm
from .tensor import Tensor, add, relu, reshape, take

STAGE_BLOCKS_DEFAULT = (3, 4, 6, 3)
STAGE_CHANNELS_DEFAULT = (256, 512, 1024, 2048)
VARIANTS = ("MP3D63", "MR3D50")
POLICIES = ("anisotropic", "isotropic")
CONVERSIONS = ("GTM", "CTM")


@dataclass
class BlockSpec:
    """One bottleneck residual block."""
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    block_kind: str = "pseudo3d"  # or "full3d"
    spatial_stride: int = 1
    depth_stride: int = 1

    def __post_init__(self):
        if self.block_kind not in ("pseudo3d", "full3d"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if self.spatial_stride not in (1, 2):
            raise ValueError("spatial_stride must be 1 or 2")


@dataclass
class BackboneConfig:
    variant: str = "MP3D63"
    pooling_policy: str = "anisotropic"
    conversion: str = "GTM"
    input_slices: int = 9
    stage_blocks: tuple = STAGE_BLOCKS_DEFAULT
    stage_channels: tuple = STAGE_CHANNELS_DEFAULT
    stem_channels: int = 64
    gn_groups: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling_policy not in POLICIES:
            raise ValueError(f"pooling_policy must be one of {POLICIES}")
        if self.conversion not in CONVERSIONS:
            raise ValueError(f"conversion must be one of {CONVERSIONS}")
        if self.input_slices < 1 or self.input_slices % 2 == 0:
            raise ValueError(f"input_slices must be odd and positive, got {self.input_slices}")
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ValueError("stage_blocks and stage_channels must have 4 entries")

    @property
    def block_kind(self):
        return "pseudo3d" if self.variant == "MP3D63" else "full3d"


class Bottleneck(Module):
    """1x1x1 reduce -> (1x3x3 [-> 3x1x1] | 3x3x3) -> 1x1x1 expand, GN+relu
    between stages, residual add, final relu."""

    def __init__(self, spec: BlockSpec, gn_groups, rng):
        super().__init__()
        self.spec = spec
        cin, mid, cout = spec.in_channels, spec.bottleneck_channels, spec.out_channels
        s, ds = spec.spatial_stride, spec.depth_stride
        self.conv_reduce = Conv3d(cin, mid, (1, 1, 1), stride=(ds, s, s), bias=False, rng=rng)
        self.norm_reduce = SliceGroupNorm(mid, gn_groups)
        if spec.block_kind == "pseudo3d":
            self.conv_spatial = Conv3d(mid, mid, (1, 3, 3), pad=(0, 1, 1), bias=False, rng=rng)
            self.norm_spatial = SliceGroupNorm(mid, gn_groups)
            self.conv_depth = Conv3d(mid, mid, (3, 1, 1), pad=(1, 0, 0), bias=False, rng=rng)
            self.norm_depth = SliceGroupNorm(mid, gn_groups)
        else:
            self.conv_spatial = Conv3d(mid, mid, (3, 3, 3), pad=(1, 1, 1), bias=False, rng=rng)
            self.norm_spatial = SliceGroupNorm(mid, gn_groups)
            self.conv_depth = None
            self.norm_depth = None
        self.conv_expand = Conv3d(mid, cout, (1, 1, 1), bias=False, rng=rng)
        self.norm_expand = SliceGroupNorm(cout, gn_groups)
        if cin != cout or s != 1 or ds != 1:
            self.conv_shortcut = Conv3d(cin, cout, (1, 1, 1), stride=(ds, s, s), bias=False, rng=rng)
            self.norm_shortcut = SliceGroupNorm(cout, gn_groups)
        else:
            self.conv_shortcut = None
            self.norm_shortcut = None

    def forward(self, x):
        h = relu(self.norm_reduce(self.conv_reduce(x)))
        h = relu(self.norm_spatial(self.conv_spatial(h)))
        if self.conv_depth is not None:
            h = relu(self.norm_depth(self.conv_depth(h)))
        h = self.norm_expand(self.conv_expand(h))
        if self.conv_shortcut is not None:
            shortcut = self.norm_shortcut(self.conv_shortcut(x))
        else:
            shortcut = x
        return relu(add(h, shortcut))

    def profile(self, shape, add_row, fpm):
        from .nn import relu_flops
        pairs = [("reduce", self.conv_reduce, self.norm_reduce),
                 ("spatial", self.conv_spatial, self.norm_spatial)]
        if self.conv_depth is not None:
            pairs.append(("depth", self.conv_depth, self.norm_depth))
        pairs.append(("expand", self.conv_expand, self.norm_expand))
        h = shape
        act_flops = 0
        for tag, conv, norm in pairs:
            out = conv.out_shape(h)
            add_row(tag, conv.param_count(), conv.flops(h, fpm))
            add_row(f"{tag}_norm", norm.param_count(), norm.flops(out, fpm))
            if tag != "expand":
                act_flops += relu_flops(out)
            h = out
        if self.conv_shortcut is not None:
            add_row("shortcut", self.conv_shortcut.param_count(),
                    self.conv_shortcut.flops(shape, fpm))
            add_row("shortcut_norm", self.norm_shortcut.param_count(),
                    self.norm_shortcut.flops(h, fpm))
        act_flops += relu_flops(h)  # post-residual relu
        add_row("activations", 0, act_flops)
        return h


class GroupTransform(Module):
    """Learned 3D-to-2D conversion: view [N,C,D,H,W] as [N,C*D,H,W] and run
    a C-group 1x1 convolution (D inputs, 1 output per group)."""

    def __init__(self, channels, depth, rng):
        super().__init__()
        self.channels = channels
        self.depth = depth
        self.conv = Conv3d(channels * depth, channels, (1, 1, 1), groups=channels,
                           bias=True, rng=rng)
        # start as a center-slice projection: the conversion initially
        # matches the single-slice baseline and training recruits the
        # neighboring slices from there
        w = np.zeros_like(self.conv.weight.data)
        w[:, depth // 2] = 1.0
        self.conv.weight.data = w

    def forward(self, x):
        n, c, d, h, w = x.shape
        if c != self.channels or d != self.depth:
            raise ValueError(f"group transform built for C={self.channels}, D={self.depth}; "
                             f"got C={c}, D={d}")
        flat = reshape(x, (n, c * d, 1, h, w))
        out = self.conv(flat)
        return reshape(out, (n, c, h, w))

    def profile(self, shape, add_row, fpm):
        n, c, d, h, w = shape
        add_row("group_conv", self.conv.param_count(),
                self.conv.flops((n, c * d, 1, h, w), fpm))
        return (n, c, h, w)


class CenterCrop(Module):
    """Baseline 3D-to-2D conversion: keep the center depth slice."""

    def __init__(self, channels, depth):
        super().__init__()
        self.channels = channels
        self.depth = depth

    def forward(self, x):
        n, c, d, h, w = x.shape
        if d % 2 == 0:
            raise ValueError(f"center crop requires odd depth, got {d}")
        out = take(x, [(d - 1) // 2], axis=2)
        return reshape(out, (n, c, h, w))

    def profile(self, shape, add_row, fpm):
        n, c, d, h, w = shape
        return (n, c, h, w)


class Backbone(Module):
    """Stem + four residual stages + one conversion per stage output."""

    def __init__(self, config: BackboneConfig, rng=None):
        super().__init__()
        self.config = config
        if rng is None:
            rng = np.random.default_rng(0)
        iso = config.pooling_policy == "isotropic"
        stem_ds = 2 if iso else 1
        self.stem_conv = Conv3d(1, config.stem_channels, (1, 7, 7),
                                stride=(stem_ds, 2, 2), pad=(0, 3, 3), bias=False, rng=rng)
        self.stem_norm = SliceGroupNorm(config.stem_channels, config.gn_groups)
        if iso:
            self.stem_pool = Pool3d("max", (3, 3, 3), (2, 2, 2), pad=(1, 1, 1))
        else:
            self.stem_pool = Pool3d("max", (1, 3, 3), (1, 2, 2), pad=(0, 1, 1))

        kind = config.block_kind
        in_ch = config.stem_channels
        self.stages = ModuleList()
        for stage_idx, (n_blocks, out_ch) in enumerate(zip(config.stage_blocks,
                                                           config.stage_channels)):
            mid = out_ch // 4
            blocks = ModuleList()
            for b in range(n_blocks):
                stride = 2 if (stage_idx > 0 and b == 0) else 1
                depth_stride = stride if iso else 1
                spec = BlockSpec(in_ch, mid, out_ch, block_kind=kind,
                                 spatial_stride=stride, depth_stride=depth_stride)
                blocks.append(Bottleneck(spec, config.gn_groups, rng))
                in_ch = out_ch
            self.stages.append(blocks)

        conv_rng = np.random.default_rng(rng.integers(2**63))
        self.conversions = ModuleList()
        for stage_idx, out_ch in enumerate(config.stage_channels):
            d = self.stage_depth(stage_idx)
            if config.conversion == "GTM":
                self.conversions.append(GroupTransform(out_ch, d, conv_rng))
            else:
                self.conversions.append(CenterCrop(out_ch, d))

    # -- depth bookkeeping -------------------------------------------------
    def stage_depth(self, stage_idx):
        """Depth extent at the output of stage stage_idx (0-based, C2..C5)."""
        d = self.config.input_slices
        if self.config.pooling_policy == "anisotropic":
            return d
        d = (d - 1) // 2 + 1          # stem conv, depth stride 2
        d = (d + 2 - 3) // 2 + 1      # stem pool, window 3 stride 2 pad 1
        for s in range(1, stage_idx + 1):
            d = (d - 1) // 2 + 1      # transition block depth stride 2
        return d

    def forward(self, x, with_3d=False):
        """Returns the four converted 2D stage features [N,C,H,W]; with
        with_3d also the pre-conversion 3D features and the stage-2
        first-block probe output."""
        h = self.stem_pool(relu(self.stem_norm(self.stem_conv(x))))
        feats3d = []
        probe = None
        for stage_idx, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                h = block(h)
                if stage_idx == 0 and b == 0:
                    probe = h
            feats3d.append(h)
        feats2d = [conv(f) for conv, f in zip(self.conversions, feats3d)]
        if with_3d:
            return feats2d, feats3d, probe
        return feats2d

    def profile(self, input_shape, add_row, fpm):
        """Mirror forward for cost accounting; returns 2D output shapes."""
        from .nn import relu_flops
        h = self.stem_conv.out_shape(input_shape)
        add_row("stem.conv", self.stem_conv.param_count(),
                self.stem_conv.flops(input_shape, fpm))
        add_row("stem.norm", self.stem_norm.param_count(), self.stem_norm.flops(h, fpm))
        add_row("stem.relu", 0, relu_flops(h))
        add_row("stem.pool", 0, self.stem_pool.flops(h, fpm))
        h = self.stem_pool.out_shape(h)
        shapes3d = []
        for stage_idx, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                rows = []
                h = block.profile(h, lambda n, p, f: rows.append((n, p, f)), fpm)
                for n, p, f in rows:
                    add_row(f"stage{stage_idx + 2}.{b}.{n}", p, f)
            shapes3d.append(h)
        out2d = []
        for stage_idx, (conv, shape) in enumerate(zip(self.conversions, shapes3d)):
            rows = []
            s2d = conv.profile(shape, lambda n, p, f: rows.append((n, p, f)), fpm)
            for n, p, f in rows:
                add_row(f"conversion{stage_idx + 2}.{n}", p, f)
            out2d.append(s2d)
        return out2d


def build_backbone(config: BackboneConfig, rng=None) -> Backbone:
    return Backbone(config, rng=rng)
