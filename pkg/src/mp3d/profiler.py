"""Closed-form parameter and FLOP accounting over a built detector.

Convolution cost is kd*kh*kw * (Cin/g) * Cout per output element, times a
configurable FLOPs-per-multiply-accumulate convention (1 or 2).
Normalizations count 2 FLOPs per element, activations 1, pooling 1 per
window element. Costs are derived from layer shapes alone; nothing is
executed.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

from .anchors import AnchorConfig
from .backbone import BackboneConfig
from .detector import Detector


@dataclass
class CostRow:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list
    input_dhw: tuple = None
    flops_per_mac: int = 2

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def gflops(self):
        return self.total_flops / 1e9

    def to_csv(self):
        buf = io.StringIO()
        buf.write("name,params,flops\n")
        for r in self.rows:
            buf.write(f"{r.name},{r.params},{r.flops}\n")
        buf.write(f"total,{self.total_params},{self.total_flops}\n")
        return buf.getvalue()


def _walk(model, input_dhw, flops_per_mac):
    rows = []
    d, h, w = input_dhw
    model.profile((1, 1, d, h, w), lambda n, p, f: rows.append(CostRow(n, int(p), int(f))),
                  flops_per_mac)
    return rows


def count_params(model) -> CostReport:
    """Per-layer parameter counts (grouped by parameter owner)."""
    grouped = {}
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        grouped[layer] = grouped.get(layer, 0) + p.size
    rows = [CostRow(name, count, 0) for name, count in grouped.items()]
    return CostReport(rows)


def count_flops(model, input_dhw, flops_per_mac=2) -> CostReport:
    """Per-layer FLOPs (and params) for a [1, 1, D, H, W] input."""
    return CostReport(_walk(model, input_dhw, flops_per_mac),
                      input_dhw=tuple(input_dhw), flops_per_mac=flops_per_mac)


def detector_cost(variant, slices, image_hw=(512, 512), flops_per_mac=2,
                  backbone_kwargs=None) -> CostReport:
    """Cost of a freshly built full detector (backbone + neck + head)."""
    kwargs = dict(backbone_kwargs or {})
    config = BackboneConfig(variant=variant, input_slices=slices, **kwargs)
    model = Detector(config, AnchorConfig(), seed=0)
    return count_flops(model, (slices,) + tuple(image_hw), flops_per_mac)


def report_table(variants, slice_counts, image_hw=(512, 512), flops_per_mac=2,
                 backbone_kwargs=None):
    """CSV table mirroring the cost columns of the slice-count study."""
    buf = io.StringIO()
    buf.write("variant,slices,params,flops,gflops\n")
    for variant in variants:
        for s in slice_counts:
            rep = detector_cost(variant, s, image_hw, flops_per_mac, backbone_kwargs)
            buf.write(f"{variant},{s},{rep.total_params},{rep.total_flops},{rep.gflops:.2f}\n")
    return buf.getvalue()
