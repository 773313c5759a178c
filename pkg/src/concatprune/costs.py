"""Exact parameter and FLOP accounting.

All counts are Python ints (arbitrary precision), totals are exact sums of
per-layer entries. Convention: 1 multiply-accumulate = 2 FLOPs; pooling,
upsampling, concatenation and activations are counted as zero-cost (memory
movement is out of scope). The convention is stated in every CSV header.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import MismatchedModels
from .graph import ConnectivityGraph, affected_layers
from .ir import NetworkIR, infer_shapes
from .pruning import PruningPlan

FLOP_NOTE = "1 MAC = 2 FLOPs; pool/upsample/concat/activation counted as 0"


@dataclass
class LayerCost:
    layer_id: int
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_params: int
    total_flops: int
    # populated by diff_reports, relative to a baseline
    params_sparsity: float | None = None
    flops_sparsity: float | None = None


def _layer_params(layer) -> int:
    if layer.kind == "Conv2D":
        a = layer.attrs
        n = a["out_channels"] * a["in_channels"] * a["kernel_h"] * a["kernel_w"]
        if a["has_bias"]:
            n += a["out_channels"]
        return n
    if layer.kind == "BatchNorm2D":
        return 4 * layer.attrs["channels"]
    return 0


def _layer_flops(layer, out_shape) -> int:
    c, h, w = out_shape
    if layer.kind == "Conv2D":
        a = layer.attrs
        n = 2 * h * w * a["out_channels"] * a["in_channels"] * a["kernel_h"] * a["kernel_w"]
        if a["has_bias"]:
            n += h * w * a["out_channels"]
        return n
    if layer.kind == "BatchNorm2D":
        return 2 * h * w * c
    return 0


def cost_report(ir: NetworkIR) -> CostReport:
    """Parameter and FLOP counts per layer and in total."""
    shapes = infer_shapes(ir)
    rows = [
        LayerCost(l.id, l.kind, _layer_params(l), _layer_flops(l, shapes[l.id]))
        for l in ir.layers
    ]
    return CostReport(
        per_layer=rows,
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
    )


def count_params(ir: NetworkIR) -> CostReport:
    rows = [LayerCost(l.id, l.kind, _layer_params(l), 0) for l in ir.layers]
    return CostReport(per_layer=rows, total_params=sum(r.params for r in rows), total_flops=0)


def count_flops(ir: NetworkIR) -> CostReport:
    return cost_report(ir)


def predict_after_prune(
    ir: NetworkIR, graph: ConnectivityGraph, plan: PruningPlan
) -> CostReport:
    """Analytic post-prune cost, computed from attrs and the plan alone.

    Independent of apply_plan: derives each layer's surviving row/column
    counts from the plan and the graph's edges, then reuses the closed-form
    cost formulas. Serves as the second route against a recount of the
    actually pruned model.
    """
    shapes = infer_shapes(ir)
    removed_rows = {l: len(set(r)) for l, r in plan.removals.items() if r}
    removed_cols: dict[int, int] = {}
    for src, idxs in plan.removals.items():
        if not idxs:
            continue
        for dst, _, _offset in affected_layers(graph, src):
            removed_cols[dst] = removed_cols.get(dst, 0) + len(set(idxs))

    rows = []
    bn_owner = {}  # bn layer id -> producing conv id
    for l in ir.layers:
        if l.kind == "BatchNorm2D":
            bn_owner[l.id] = l.inputs[0]

    for l in ir.layers:
        if l.kind == "Conv2D":
            a = l.attrs
            out_c = a["out_channels"] - removed_rows.get(l.id, 0)
            in_c = a["in_channels"] - removed_cols.get(l.id, 0)
            params = out_c * in_c * a["kernel_h"] * a["kernel_w"]
            if a["has_bias"]:
                params += out_c
            _, h, w = shapes[l.id]
            flops = 2 * h * w * out_c * in_c * a["kernel_h"] * a["kernel_w"]
            if a["has_bias"]:
                flops += h * w * out_c
        elif l.kind == "BatchNorm2D":
            c = l.attrs["channels"] - removed_rows.get(bn_owner[l.id], 0)
            params = 4 * c
            _, h, w = shapes[l.id]
            flops = 2 * h * w * c
        else:
            params = 0
            flops = 0
        rows.append(LayerCost(l.id, l.kind, params, flops))
    return CostReport(
        per_layer=rows,
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
    )


def diff_reports(base: CostReport, pruned: CostReport) -> CostReport:
    """Sparsity of `pruned` relative to `base`; layer universes must match."""
    base_ids = [r.layer_id for r in base.per_layer]
    pruned_ids = [r.layer_id for r in pruned.per_layer]
    if base_ids != pruned_ids:
        raise MismatchedModels("reports cover different layer-id universes")
    out = CostReport(
        per_layer=list(pruned.per_layer),
        total_params=pruned.total_params,
        total_flops=pruned.total_flops,
    )
    out.params_sparsity = 1.0 - pruned.total_params / base.total_params if base.total_params else 0.0
    out.flops_sparsity = 1.0 - pruned.total_flops / base.total_flops if base.total_flops else 0.0
    return out


def report_csv(report: CostReport) -> str:
    """Distribution CSV: per-layer share of the model totals, totals row last."""
    lines = [f"# {FLOP_NOTE}", "layer_id,kind,params,flops,params_pct,flops_pct"]
    tp = report.total_params or 1
    tf = report.total_flops or 1
    for r in report.per_layer:
        lines.append(
            f"{r.layer_id},{r.kind},{r.params},{r.flops},"
            f"{100.0 * r.params / tp:.4f},{100.0 * r.flops / tf:.4f}"
        )
    lines.append(f"total,,{report.total_params},{report.total_flops},100.0000,100.0000")
    return "\n".join(lines) + "\n"


def diff_csv(base: CostReport, pruned: CostReport) -> str:
    """Per-layer before/after deltas plus a final sparsity summary row."""
    diffed = diff_reports(base, pruned)
    lines = [
        f"# {FLOP_NOTE}",
        "layer_id,kind,params_base,params_pruned,params_delta_pct,"
        "flops_base,flops_pruned,flops_delta_pct",
    ]
    for rb, rp in zip(base.per_layer, diffed.per_layer):
        dp = 100.0 * (rb.params - rp.params) / rb.params if rb.params else 0.0
        df = 100.0 * (rb.flops - rp.flops) / rb.flops if rb.flops else 0.0
        lines.append(
            f"{rb.layer_id},{rb.kind},{rb.params},{rp.params},{dp:.4f},"
            f"{rb.flops},{rp.flops},{df:.4f}"
        )
    lines.append(
        f"total,,{base.total_params},{diffed.total_params},"
        f"{100.0 * (diffed.params_sparsity or 0.0):.4f},"
        f"{base.total_flops},{diffed.total_flops},"
        f"{100.0 * (diffed.flops_sparsity or 0.0):.4f}"
    )
    return "\n".join(lines) + "\n"
