"""Per-layer sensitivity sweeps and V-function rate selection.

Each (layer, rate) cell prunes exactly one layer of a scratch copy,
measures the proxy score against the unpruned model, and records the
whole-model parameter/FLOP reduction (downstream kernel removals included).
Selection computes V(x, y) = x * y^a with x normalized to a fraction of the
swept model's total cost, so one threshold works for both bases and for
models of any size.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costs import cost_report
from .errors import ParseError
from .graph import ConnectivityGraph
from .ir import NetworkIR
from .evaluate import proxy_score
from .pruning import Criterion, apply_plan, select_filters

BASES = ("params", "flops", "both")

DEFAULT_RATE_GRID = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75)


@dataclass
class SensitivityRecord:
    layer: int
    rate: float
    score: float
    params_removed: int
    flops_removed: int
    basis: str = "both"


@dataclass
class SelectionConfig:
    a: float = 2.0
    threshold: float = 0.01
    rate_grid: tuple[float, ...] = DEFAULT_RATE_GRID
    basis: str = "both"
    exclusions: frozenset[int] | None = None  # None -> head convs found from the graph

    def __post_init__(self):
        if self.basis not in BASES:
            raise ParseError(f"unknown basis {self.basis!r}; valid: {', '.join(BASES)}")
        if self.threshold <= 0:
            raise ParseError("threshold must be positive")
        if self.a < 0:
            raise ParseError("exponent a must be non-negative")
        if not self.rate_grid or any(not (0 < r < 1) for r in self.rate_grid):
            raise ParseError(f"rate grid must be non-empty with rates in (0,1): {self.rate_grid}")
        self.rate_grid = tuple(sorted(self.rate_grid))


def v_value(x: float, y: float, a: float) -> float:
    """Selection value of removing cost x at post-prune score y."""
    return x * y**a


def default_exclusions(ir: NetworkIR, graph: ConnectivityGraph) -> frozenset[int]:
    """Convs whose output reaches an Output layer without crossing a conv.

    These are the detection-head convs; pruning them would change the output
    arity, so they are never swept or selected.
    """
    excluded: set[int] = set()
    produced_by: dict[int, set[int]] = {}  # layer id -> conv ids visible at its output
    for layer in ir.layers:
        if layer.kind == "Conv2D":
            produced_by[layer.id] = {layer.id}
        else:
            srcs: set[int] = set()
            for i in layer.inputs:
                srcs |= produced_by.get(i, set())
            produced_by[layer.id] = srcs
            if layer.kind == "Output":
                excluded |= srcs
    return frozenset(excluded & set(graph.vertices))


def _sweep_cell(ir, graph, criterion, base, layer, rate, calibration):
    plan = select_filters(ir, [(layer, rate)], criterion, mode="independent")
    pruned = apply_plan(ir, graph, plan)
    rep = cost_report(pruned.ir)
    score = proxy_score(pruned.ir, ir, calibration)
    return (
        layer,
        rate,
        score,
        base.total_params - rep.total_params,
        base.total_flops - rep.total_flops,
    )


def sweep(
    ir: NetworkIR,
    graph: ConnectivityGraph,
    criterion: Criterion,
    config: SelectionConfig,
    calibration: list[np.ndarray],
    jobs: int = 1,
) -> list[SensitivityRecord]:
    """Prune each non-excluded vertex at each grid rate, one at a time.

    Pure with respect to `ir`; every cell works on copies. Cells are
    independent and may run on a thread pool; results are merged in
    (layer, rate) order regardless of completion order.
    """
    excl = config.exclusions if config.exclusions is not None else default_exclusions(ir, graph)
    layers = [v for v in graph.vertices if v not in excl]
    base = cost_report(ir)
    cells = [(l, r) for l in layers for r in config.rate_grid]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(
                    lambda c: _sweep_cell(ir, graph, criterion, base, c[0], c[1], calibration),
                    cells,
                )
            )
    else:
        results = [
            _sweep_cell(ir, graph, criterion, base, l, r, calibration) for l, r in cells
        ]

    records = [
        SensitivityRecord(
            layer=l, rate=r, score=s, params_removed=dp, flops_removed=df, basis=config.basis
        )
        for l, r, s, dp, df in results
    ]
    records.sort(key=lambda rec: (rec.layer, rec.rate))
    return records


def _select_one_basis(records, config, baseline_total, attr) -> dict[int, float]:
    chosen: dict[int, float] = {}
    for rec in records:
        x = getattr(rec, attr) / baseline_total if baseline_total else 0.0
        if v_value(x, rec.score, config.a) > config.threshold:
            if rec.rate > chosen.get(rec.layer, -1.0):
                chosen[rec.layer] = rec.rate
    return chosen


def select(
    records: list[SensitivityRecord],
    config: SelectionConfig,
    baseline_params: int,
    baseline_flops: int,
) -> list[tuple[int, float]]:
    """Largest qualifying rate per layer; layers with none are skipped.

    Under basis "both" the per-basis selections are unioned, keeping the
    larger rate when they disagree on a layer. Sorted by layer id.
    """
    picks: dict[int, float] = {}
    if config.basis in ("params", "both"):
        picks.update(_select_one_basis(records, config, baseline_params, "params_removed"))
    if config.basis in ("flops", "both"):
        for layer, rate in _select_one_basis(records, config, baseline_flops, "flops_removed").items():
            if rate > picks.get(layer, -1.0):
                picks[layer] = rate
    return sorted(picks.items())


def records_csv(
    records: list[SensitivityRecord],
    config: SelectionConfig,
    baseline_params: int,
    baseline_flops: int,
) -> str:
    lines = ["layer,rate,score,params_removed,flops_removed,v_params,v_flops"]
    for r in records:
        vp = v_value(r.params_removed / baseline_params if baseline_params else 0.0, r.score, config.a)
        vf = v_value(r.flops_removed / baseline_flops if baseline_flops else 0.0, r.score, config.a)
        lines.append(
            f"{r.layer},{r.rate},{r.score:.9f},{r.params_removed},{r.flops_removed},"
            f"{vp:.9f},{vf:.9f}"
        )
    return "\n".join(lines) + "\n"
