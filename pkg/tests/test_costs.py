"""Cost model: exact counting, analytic prediction vs recount, reports."""

import numpy as np
import pytest

from concatprune import (
    MismatchedModels,
    apply_plan,
    build_graph,
    cost_report,
    count_flops,
    count_params,
    diff_reports,
    predict_after_prune,
)
from concatprune.costs import diff_csv, report_csv
from concatprune.zoo import NetBuilder, yolov7_like, yolov7_tiny_like

from netgen import random_network, random_plan


def conv_net(out_c, in_c, k, hw, bias):
    b = NetBuilder("c", [in_c, hw, hw], seed=0)
    b.conv(None, out_c, k, bn=False, act=None, bias=bias)
    return b.build()


class TestCounting:
    def test_param_anchor_4640(self):
        ir = conv_net(32, 16, 3, 8, bias=True)
        assert count_params(ir).total_params == 4640

    def test_flop_anchor_37748736(self):
        # 64x64 output, stride 1, same padding, no bias
        ir = conv_net(32, 16, 3, 64, bias=False)
        assert count_flops(ir).total_flops == 37_748_736

    def test_1x1_formula(self):
        for c_in, c_out in ((16, 32), (7, 5)):
            ir = conv_net(c_out, c_in, 1, 8, bias=True)
            assert count_params(ir).total_params == c_in * c_out + c_out

    def test_bn_params_and_flops(self):
        b = NetBuilder("bn", [3, 10, 10], seed=0)
        b.conv(None, 6, 1, bn=True, act=None)
        ir = b.build()
        rep = cost_report(ir)
        by_kind = {r.kind: r for r in rep.per_layer}
        assert by_kind["BatchNorm2D"].params == 24
        assert by_kind["BatchNorm2D"].flops == 2 * 10 * 10 * 6

    def test_additivity(self):
        for seed in range(6):
            rep = cost_report(random_network(seed))
            assert rep.total_params == sum(r.params for r in rep.per_layer)
            assert rep.total_flops == sum(r.flops for r in rep.per_layer)

    def test_counts_are_ints(self):
        rep = cost_report(yolov7_tiny_like(input_hw=64))
        assert isinstance(rep.total_params, int)
        assert isinstance(rep.total_flops, int)


class TestPrediction:
    def test_prediction_equals_recount(self):
        for seed in range(25):
            ir = random_network(seed)
            g = build_graph(ir)
            plan = random_plan(ir, seed + 3)
            predicted = predict_after_prune(ir, g, plan)
            actual = cost_report(apply_plan(ir, g, plan).ir)
            assert predicted.total_params == actual.total_params, seed
            assert predicted.total_flops == actual.total_flops, seed
            for pr, ar in zip(predicted.per_layer, actual.per_layer):
                assert (pr.layer_id, pr.params, pr.flops) == (ar.layer_id, ar.params, ar.flops)

    def test_halving_isolated_mid_conv(self):
        b = NetBuilder("h", [3, 16, 16], seed=0)
        a = b.conv(None, 8, 3, bn=False, act=None)
        mid = b.conv(a, 16, 3, bn=False, act=None)
        last = b.conv(mid, 8, 3, bn=False, act=None)
        ir = b.build()
        g = build_graph(ir)
        from concatprune.pruning import PruningPlan

        pm = apply_plan(ir, g, PruningPlan(removals={mid: list(range(8))}))
        base = {r.layer_id: r for r in cost_report(ir).per_layer}
        got = {r.layer_id: r for r in cost_report(pm.ir).per_layer}
        assert got[mid].flops * 2 == base[mid].flops
        assert got[last].flops * 2 == base[last].flops

    def test_flops_linear_in_surviving_slice_width(self):
        # consumer FLOPs scale with its surviving in_channels
        b = NetBuilder("lin", [3, 8, 8], seed=1)
        a = b.conv(None, 12, 1, bn=False, act=None)
        c = b.conv(a, 6, 3, bn=False, act=None)
        ir = b.build()
        g = build_graph(ir)
        from concatprune.pruning import PruningPlan

        base = {r.layer_id: r for r in cost_report(ir).per_layer}[c].flops
        for n in (3, 6, 9):
            pm = apply_plan(ir, g, PruningPlan(removals={a: list(range(n))}))
            got = {r.layer_id: r for r in cost_report(pm.ir).per_layer}[c].flops
            assert got * 12 == base * (12 - n)


class TestDiff:
    def test_identical_reports_zero_sparsity(self):
        ir = random_network(0)
        rep = cost_report(ir)
        d = diff_reports(rep, rep)
        assert d.params_sparsity == 0.0
        assert d.flops_sparsity == 0.0

    def test_half_params_half_sparsity(self):
        ir = conv_net(16, 8, 1, 8, bias=False)
        half = conv_net(8, 8, 1, 8, bias=False)
        d = diff_reports(cost_report(ir), cost_report(half))
        assert d.params_sparsity == pytest.approx(0.5)

    def test_mismatched_universes_rejected(self):
        a = cost_report(random_network(0))
        b = cost_report(random_network(1))
        with pytest.raises(MismatchedModels):
            diff_reports(a, b)

    def test_csv_shapes(self):
        ir = random_network(2)
        rep = cost_report(ir)
        csv = report_csv(rep)
        lines = [l for l in csv.strip().splitlines() if not l.startswith("#")]
        assert lines[0] == "layer_id,kind,params,flops,params_pct,flops_pct"
        assert lines[-1].startswith("total,")
        assert len(lines) == len(ir.layers) + 2

        g = build_graph(ir)
        plan = random_plan(ir, 5)
        pruned = cost_report(apply_plan(ir, g, plan).ir)
        dcsv = diff_csv(rep, pruned)
        dlines = [l for l in dcsv.strip().splitlines() if not l.startswith("#")]
        assert dlines[-1].startswith("total,")
        assert len(dlines) == len(ir.layers) + 2


class TestDetectorScaleTotals:
    def test_order_of_magnitude(self):
        # style-alike configs, not weight-exact replicas: order of magnitude only
        v7 = count_params(yolov7_like(input_hw=64)).total_params
        tiny = count_params(yolov7_tiny_like(input_hw=64)).total_params
        assert 1e7 <= v7 < 1e8
        assert 1e6 <= tiny < 1e7

    def test_flops_fit_in_python_ints(self):
        rep = cost_report(yolov7_like())  # 640x640 input
        assert rep.total_flops > 2**32  # would overflow 32-bit counters
