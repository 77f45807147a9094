"""Closed-form parameter/FLOP accounting."""
import numpy as np
import pytest

from mp3d.backbone import BackboneConfig, build_backbone
from mp3d.nn import Conv3d
from mp3d.profiler import count_flops, count_params, detector_cost, report_table

TINY_KW = dict(stage_blocks=(1, 1, 1, 1), stage_channels=(8, 16, 32, 64),
               stem_channels=4, gn_groups=2)


class TestClosedForms:
    def test_conv_param_example(self):
        conv = Conv3d(2, 4, (1, 3, 3), bias=True)
        assert conv.param_count() == 2 * 4 * 9 + 4

    def test_conv_flop_example(self):
        conv = Conv3d(1, 1, (1, 1, 1), bias=False)
        assert conv.flops((1, 1, 1, 4, 4), 2) == 32
        assert conv.flops((1, 1, 1, 4, 4), 1) == 16

    def test_separable_pair_arithmetic(self):
        c = 6
        spatial = Conv3d(c, c, (1, 3, 3), bias=False)
        depth = Conv3d(c, c, (3, 1, 1), bias=False)
        full = Conv3d(c, c, (3, 3, 3), bias=False)
        assert spatial.param_count() + depth.param_count() == 12 * c * c
        assert full.param_count() == 27 * c * c

    def test_grouped_conv_params(self):
        conv = Conv3d(6, 2, (1, 1, 1), groups=2, bias=True)
        assert conv.param_count() == 2 * 3 + 2


class TestBackboneCosts:
    def test_params_invariant_to_depth(self):
        counts = set()
        for d in (3, 5, 9):
            bb = build_backbone(BackboneConfig(input_slices=d, conversion="CTM",
                                               **TINY_KW))
            counts.add(bb.param_count())
        assert len(counts) == 1

    def test_flops_affine_in_depth(self):
        totals = {}
        for d in (3, 7, 11):
            bb = build_backbone(BackboneConfig(input_slices=d, **TINY_KW))
            totals[d] = count_flops(bb, (d, 64, 64), 2).total_flops
        # three collinear points: equal second difference
        assert totals[11] - totals[7] == totals[7] - totals[3]
        assert totals[11] > totals[7] > totals[3]

    def test_spatial_scaling_near_quadratic(self):
        bb = build_backbone(BackboneConfig(input_slices=3, **TINY_KW))
        small = count_flops(bb, (3, 64, 64), 2).total_flops
        big = count_flops(bb, (3, 128, 128), 2).total_flops
        assert 3.9 <= big / small <= 4.1

    def test_count_params_totals_match_module(self):
        bb = build_backbone(BackboneConfig(input_slices=3, **TINY_KW))
        assert count_params(bb).total_params == bb.param_count()

    def test_profile_flops_params_match_module(self):
        bb = build_backbone(BackboneConfig(input_slices=3, **TINY_KW))
        rep = count_flops(bb, (3, 64, 64), 2)
        assert rep.total_params == bb.param_count()


class TestDetectorCost:
    def test_full_scale_param_difference(self):
        mp = detector_cost("MP3D63", 3, image_hw=(64, 64))
        mr = detector_cost("MR3D50", 3, image_hw=(64, 64))
        diff = mr.total_params - mp.total_params
        assert abs(diff - 18.87e6) / 18.87e6 < 0.10

    def test_mr3d_costs_more_everywhere(self):
        for d in (3, 9):
            mp = detector_cost("MP3D63", d, image_hw=(128, 128))
            mr = detector_cost("MR3D50", d, image_hw=(128, 128))
            assert mr.total_flops > mp.total_flops


class TestReportTable:
    def test_empty_variants(self):
        assert report_table((), (5, 9)) == "variant,slices,params,flops,gflops\n"

    def test_format_and_monotonicity(self):
        kw = dict(stage_blocks=(1, 1, 1, 1), stage_channels=(8, 16, 32, 64),
                  stem_channels=4, gn_groups=2)
        table = report_table(("MP3D63",), (3, 5, 7), image_hw=(64, 64),
                             backbone_kwargs=dict(kw, conversion="CTM"))
        lines = table.strip().split("\n")
        assert lines[0] == "variant,slices,params,flops,gflops"
        rows = [l.split(",") for l in lines[1:]]
        flops = [int(r[3]) for r in rows]
        assert flops == sorted(flops) and len(set(flops)) == 3
        # with the center-crop conversion no parameter depends on D
        assert len({r[2] for r in rows}) == 1

    def test_gtm_params_nearly_constant_in_depth(self):
        # the learned conversion adds sum(C_i) weights per slice, a <0.1%
        # drift of the total
        counts = [detector_cost("MP3D63", d, image_hw=(64, 64),
                                backbone_kwargs=TINY_KW).total_params
                  for d in (3, 9)]
        assert counts[0] != counts[1]
        assert abs(counts[1] - counts[0]) / counts[0] < 1e-3

    def test_gflops_two_decimals(self):
        table = report_table(("MP3D63",), (3,), image_hw=(64, 64),
                             backbone_kwargs=TINY_KW)
        gfl = table.strip().split("\n")[1].split(",")[4]
        assert len(gfl.split(".")[1]) == 2


class TestCostReportCsv:
    def test_per_layer_csv(self):
        bb = build_backbone(BackboneConfig(input_slices=3, **TINY_KW))
        rep = count_flops(bb, (3, 64, 64), 2)
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "name,params,flops"
        assert lines[-1] == f"total,{rep.total_params},{rep.total_flops}"
