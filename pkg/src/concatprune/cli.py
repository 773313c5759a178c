"""Command-line interface.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
Model arguments accept either a manifest path (`model.json`, with the
weight blob next to it) or `zoo:NAME` for a bundled builder.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import zoo
from .costs import cost_report, diff_csv, report_csv
from .errors import PruneToolError
from .evaluate import forward, make_calibration
from .graph import build_graph, export_dot
from .ir import NetworkIR, infer_shapes
from .orchestrate import IterationConfig, load_config, resume, run
from .pruning import (
    CRITERIA,
    MODES,
    Criterion,
    PruningPlan,
    apply_plan,
    prune_after_fusion,
    prune_before_fusion,
    select_filters,
)
from .sensitivity import SelectionConfig, default_exclusions, records_csv, sweep
from .storage import load_model, save_model

log = logging.getLogger("concatprune")


def _resolve_model(spec: str) -> NetworkIR:
    if spec.startswith("zoo:"):
        return zoo.build(spec[4:])
    return load_model(spec)


def _criterion(args) -> Criterion:
    seed = args.seed if args.criterion == "random" else None
    return Criterion(args.criterion, seed)


def _load_calibration(path: str) -> list[np.ndarray]:
    sidecar = json.loads(Path(path).read_text(encoding="utf-8"))
    shape = [int(d) for d in sidecar["shape"]]
    count = int(sidecar.get("count", 1))
    raw = np.fromfile(Path(path).with_suffix(".bin"), dtype="<f4")
    per = int(np.prod(shape))
    if raw.size != count * per:
        raise PruneToolError(f"calibration blob holds {raw.size} floats, expected {count * per}")
    return [raw[i * per : (i + 1) * per].reshape(shape) for i in range(count)]


def cmd_inspect(args) -> int:
    ir = _resolve_model(args.model)
    shapes = infer_shapes(ir)
    report = cost_report(ir)
    costs = {r.layer_id: r for r in report.per_layer}
    print(f"{'id':>4}  {'kind':<12} {'shape':<16} {'params':>12} {'flops':>16}")
    for layer in ir.layers:
        c, h, w = shapes[layer.id]
        r = costs[layer.id]
        print(f"{layer.id:>4}  {layer.kind:<12} {f'{c}x{h}x{w}':<16} {r.params:>12} {r.flops:>16}")
    print(f"{'':>4}  {'total':<12} {'':<16} {report.total_params:>12} {report.total_flops:>16}")
    return 0


def cmd_graph(args) -> int:
    ir = _resolve_model(args.model)
    dot = export_dot(build_graph(ir))
    if args.dot == "-":
        sys.stdout.write(dot)
    else:
        Path(args.dot).write_text(dot, encoding="utf-8")
    return 0


def cmd_sensitivity(args) -> int:
    ir = _resolve_model(args.model)
    graph = build_graph(ir)
    rates = tuple(float(r) for r in args.rates.split(","))
    config = SelectionConfig(rate_grid=rates)
    if args.calib:
        calibration = _load_calibration(args.calib)
    else:
        calibration = make_calibration(ir.input_shape, args.calib_count, args.seed)
    records = sweep(ir, graph, _criterion(args), config, calibration, jobs=args.jobs)
    base = cost_report(ir)
    csv = records_csv(records, config, base.total_params, base.total_flops)
    if args.csv == "-":
        sys.stdout.write(csv)
    else:
        Path(args.csv).write_text(csv, encoding="utf-8")
    return 0


def cmd_prune(args) -> int:
    ir = _resolve_model(args.model)
    graph = build_graph(ir)
    if args.plan:
        plan = PruningPlan.load(args.plan)
    else:
        if args.layers == "all":
            layer_ids = [v for v in graph.vertices if v not in default_exclusions(ir, graph)]
        else:
            layer_ids = [int(t) for t in args.layers.split(",")]
        plan = select_filters(ir, [(l, args.rate) for l in layer_ids], _criterion(args), args.mode)

    if args.fuse_bn == "off":
        pruned = apply_plan(ir, graph, plan)
    elif args.fuse_bn == "before":
        pruned = prune_before_fusion(ir, graph, plan, fuse=True)
    else:
        pruned = prune_after_fusion(ir, plan)

    out = Path(args.out)
    save_model(pruned.ir, out.with_suffix(".json"))
    plan.save(out.with_suffix(".plan.json"))
    log.info("pruned model written to %s", out.with_suffix(".json"))
    return 0


def cmd_iterate(args) -> int:
    config = load_config(args.config) if args.config else IterationConfig()

    def progress(entry):
        print(
            f"iteration {entry.index}: {len(entry.selections)} layers, "
            f"params sparsity {entry.params_sparsity:.4f}, "
            f"flops sparsity {entry.flops_sparsity:.4f}, score {entry.score:.4f}"
        )

    if args.resume:
        trace = resume(args.out, config, jobs=args.jobs, on_iteration=progress)
    else:
        if not args.model:
            raise PruneToolError("--model is required unless --resume is given")
        ir = _resolve_model(args.model)
        trace = run(ir, config, args.out, seed=args.seed, jobs=args.jobs, on_iteration=progress)
    print(f"stopped: {trace.stop_reason} after {len(trace.entries)} iteration(s)")
    return 0


def cmd_report(args) -> int:
    base = cost_report(_resolve_model(args.base))
    if args.pruned:
        csv = diff_csv(base, cost_report(_resolve_model(args.pruned)))
    else:
        csv = report_csv(base)  # per-layer distribution of a single model
    if args.csv == "-":
        sys.stdout.write(csv)
    else:
        Path(args.csv).write_text(csv, encoding="utf-8")
    return 0


def cmd_forward(args) -> int:
    ir = _resolve_model(args.model)
    inputs = _load_calibration(args.input)
    out_ids = ir.output_ids()
    chunks = []
    meta = None
    for x in inputs:
        acts = forward(ir, x)
        outs = [acts[i] for i in out_ids]
        if meta is None:
            meta = [{"layer": i, "shape": list(a.shape)} for i, a in zip(out_ids, outs)]
        chunks.extend(a.astype("<f4").reshape(-1) for a in outs)
    out = Path(args.out)
    out.with_suffix(".json").write_text(
        json.dumps({"count": len(inputs), "outputs": meta}, indent=2) + "\n", encoding="utf-8"
    )
    with open(out.with_suffix(".bin"), "wb") as f:
        for c in chunks:
            f.write(c.tobytes())
    return 0


def _add_common(p: argparse.ArgumentParser, model: bool = True) -> None:
    if model:
        p.add_argument("--model", required=True, help="model manifest path or zoo:NAME")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel sections")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concatprune",
        description="Structured filter pruning for concatenation-based CNNs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print the layer table with params/FLOPs")
    _add_common(p)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("graph", help="export the layer connectivity graph as DOT")
    _add_common(p)
    p.add_argument("--dot", default="-", help="output path, or - for stdout")
    p.set_defaults(fn=cmd_graph)

    p = sub.add_parser("sensitivity", help="per-layer, per-rate pruning sweep")
    _add_common(p)
    p.add_argument("--rates", default="0.125,0.25,0.375,0.5,0.625,0.75")
    p.add_argument("--criterion", default="smallest_l2", choices=CRITERIA)
    p.add_argument("--csv", default="-", help="output path, or - for stdout")
    p.add_argument("--calib", help="calibration sidecar json (blob alongside)")
    p.add_argument("--calib-count", type=int, default=4)
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("prune", help="prune by plan file or layer list + rate")
    _add_common(p)
    p.add_argument("--plan", help="replay a recorded plan file")
    p.add_argument("--layers", default="all", help="comma-separated conv ids, or 'all'")
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--criterion", default="smallest_l2", choices=CRITERIA)
    p.add_argument("--mode", default="independent", choices=MODES)
    p.add_argument("--fuse-bn", default="off", choices=["before", "after", "off"])
    p.add_argument("--out", required=True, help="output prefix for model + plan files")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("iterate", help="automated iterative pruning loop")
    _add_common(p, model=False)
    p.add_argument("--model", help="model manifest path or zoo:NAME (omit with --resume)")
    p.add_argument("--config", help="iteration config json")
    p.add_argument("--out", required=True, help="output directory for trace + artifacts")
    p.add_argument("--resume", action="store_true", help="continue a persisted run")
    p.set_defaults(fn=cmd_iterate)

    p = sub.add_parser("report", help="cost distribution or sparsity diff CSV")
    _add_common(p, model=False)
    p.add_argument("--base", required=True)
    p.add_argument("--pruned", help="omit to emit the base model's distribution")
    p.add_argument("--csv", default="-", help="output path, or - for stdout")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("forward", help="evaluate a model on stored input tensors")
    _add_common(p)
    p.add_argument("--input", required=True, help="input sidecar json (blob alongside)")
    p.add_argument("--out", required=True, help="output prefix for blob + sidecar")
    p.set_defaults(fn=cmd_forward)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except PruneToolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # internal failure
        print(f"internal error: {e!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
