"""Iterative pruning driver: sweep, select, prune, recover, re-measure.

Every iteration persists its plan and model next to an incrementally
rewritten trace file, so an interrupted run can resume from the last
completed iteration and, under the same seed and config, reproduce the
uninterrupted run byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .costs import cost_report
from .errors import CorruptTrace, IoError, ParseError
from .evaluate import make_calibration, proxy_score, recalibrate_bn
from .graph import build_graph
from .ir import NetworkIR
from .pruning import Criterion, apply_plan, select_filters
from .sensitivity import SelectionConfig, default_exclusions, records_csv, select, sweep
from .storage import load_model, save_model

TRACE_FORMAT = "concatprune-trace"

RECOVERIES = ("none", "bn_recalibration")

# Informational fine-tune budget by post-prune score range; recorded in the
# trace for users who plug real training into the recovery hook.
DEFAULT_RECOVERY_BUDGET = {">0.3": 15, "<=0.3": 20, "<0.1": 25}


@dataclass
class IterationConfig:
    max_iterations: int = 14
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    criterion: Criterion = field(default_factory=lambda: Criterion("smallest_l2"))
    mode: str = "independent"
    recovery: str = "none"
    min_score: float = 0.0
    min_new_sparsity: float = 0.0
    calibration_count: int = 4
    recovery_budget_note: dict = field(default_factory=lambda: dict(DEFAULT_RECOVERY_BUDGET))

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParseError("max_iterations must be >= 1")
        if self.recovery not in RECOVERIES:
            raise ParseError(f"unknown recovery {self.recovery!r}; valid: {', '.join(RECOVERIES)}")
        if not (0.0 <= self.min_score <= 1.0):
            raise ParseError("min_score must lie in [0, 1]")

    def to_dict(self) -> dict:
        sel = self.selection
        return {
            "max_iterations": self.max_iterations,
            "selection": {
                "a": sel.a,
                "threshold": sel.threshold,
                "rate_grid": list(sel.rate_grid),
                "basis": sel.basis,
                "exclusions": sorted(sel.exclusions) if sel.exclusions is not None else None,
            },
            "criterion": {"kind": self.criterion.kind, "seed": self.criterion.seed},
            "mode": self.mode,
            "recovery": self.recovery,
            "stop": {"min_score": self.min_score, "min_new_sparsity": self.min_new_sparsity},
            "calibration_count": self.calibration_count,
            "recovery_budget_note": dict(self.recovery_budget_note),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IterationConfig":
        sel = doc.get("selection", {})
        excl = sel.get("exclusions")
        crit = doc.get("criterion", {})
        stop = doc.get("stop", {})
        return cls(
            max_iterations=int(doc.get("max_iterations", 14)),
            selection=SelectionConfig(
                a=float(sel.get("a", 2.0)),
                threshold=float(sel.get("threshold", 0.01)),
                rate_grid=tuple(sel.get("rate_grid", SelectionConfig().rate_grid)),
                basis=sel.get("basis", "both"),
                exclusions=frozenset(excl) if excl is not None else None,
            ),
            criterion=Criterion(crit.get("kind", "smallest_l2"), crit.get("seed")),
            mode=doc.get("mode", "independent"),
            recovery=doc.get("recovery", "none"),
            min_score=float(stop.get("min_score", 0.0)),
            min_new_sparsity=float(stop.get("min_new_sparsity", 0.0)),
            calibration_count=int(doc.get("calibration_count", 4)),
            recovery_budget_note=doc.get("recovery_budget_note", dict(DEFAULT_RECOVERY_BUDGET)),
        )


def load_config(path: str | Path) -> IterationConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    return IterationConfig.from_dict(doc)


def config_hash(config: IterationConfig, seed: int) -> str:
    blob = json.dumps({"config": config.to_dict(), "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class IterationEntry:
    index: int
    selections: list[tuple[int, float]]
    params_sparsity: float
    flops_sparsity: float
    score: float
    plan_path: str
    model_path: str


@dataclass
class IterationTrace:
    out_dir: Path
    seed: int
    config_hash: str
    entries: list[IterationEntry] = field(default_factory=list)
    stop_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "format": TRACE_FORMAT,
            "version": 1,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "stop_reason": self.stop_reason,
            "iterations": [
                {
                    "index": e.index,
                    "selections": [[l, r] for l, r in e.selections],
                    "params_sparsity": e.params_sparsity,
                    "flops_sparsity": e.flops_sparsity,
                    "score": e.score,
                    "plan": e.plan_path,
                    "model": e.model_path,
                }
                for e in self.entries
            ],
        }

    def save(self) -> None:
        path = self.out_dir / "trace.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_trace(out_dir: str | Path) -> IterationTrace:
    out_dir = Path(out_dir)
    path = out_dir / "trace.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CorruptTrace(f"cannot read trace: {e}") from e
    except json.JSONDecodeError as e:
        raise CorruptTrace(f"{path}: invalid JSON: {e}") from e
    if doc.get("format") != TRACE_FORMAT:
        raise CorruptTrace(f"{path}: not a {TRACE_FORMAT} file")
    trace = IterationTrace(
        out_dir=out_dir,
        seed=int(doc["seed"]),
        config_hash=doc["config_hash"],
        stop_reason=doc.get("stop_reason"),
    )
    for e in doc.get("iterations", []):
        trace.entries.append(
            IterationEntry(
                index=int(e["index"]),
                selections=[(int(l), float(r)) for l, r in e["selections"]],
                params_sparsity=float(e["params_sparsity"]),
                flops_sparsity=float(e["flops_sparsity"]),
                score=float(e["score"]),
                plan_path=e["plan"],
                model_path=e["model"],
            )
        )
    return trace


def _iterate(
    trace: IterationTrace,
    original: NetworkIR,
    current: NetworkIR,
    config: IterationConfig,
    jobs: int,
    on_iteration,
) -> IterationTrace:
    """Run iterations starting from `current` until a stop rule fires."""
    out_dir = trace.out_dir
    calibration = make_calibration(original.input_shape, config.calibration_count, trace.seed)
    base = cost_report(original)
    prev_ps = trace.entries[-1].params_sparsity if trace.entries else 0.0
    prev_fs = trace.entries[-1].flops_sparsity if trace.entries else 0.0

    it = len(trace.entries)
    while it < config.max_iterations:
        it += 1
        graph = build_graph(current)
        sel_cfg = config.selection
        if sel_cfg.exclusions is None:
            sel_cfg = SelectionConfig(
                a=sel_cfg.a,
                threshold=sel_cfg.threshold,
                rate_grid=sel_cfg.rate_grid,
                basis=sel_cfg.basis,
                exclusions=default_exclusions(current, graph),
            )
        cur_cost = cost_report(current)
        records = sweep(current, graph, config.criterion, sel_cfg, calibration, jobs=jobs)

        it_dir = out_dir / f"iter_{it:03d}"
        it_dir.mkdir(parents=True, exist_ok=True)
        (it_dir / "records.csv").write_text(
            records_csv(records, sel_cfg, cur_cost.total_params, cur_cost.total_flops),
            encoding="utf-8",
        )

        selections = select(records, sel_cfg, cur_cost.total_params, cur_cost.total_flops)
        if not selections:
            trace.stop_reason = "empty_selection"
            trace.save()
            break

        plan = select_filters(current, selections, config.criterion, config.mode)
        pruned = apply_plan(current, graph, plan)
        model = pruned.ir
        if config.recovery == "bn_recalibration" and any(
            l.kind == "BatchNorm2D" for l in model.layers
        ):
            model = recalibrate_bn(model, calibration)

        score = proxy_score(model, original, calibration)
        cost = cost_report(model)
        ps = 1.0 - cost.total_params / base.total_params
        fs = 1.0 - cost.total_flops / base.total_flops

        plan_path = it_dir / "plan.json"
        model_path = it_dir / "model.json"
        plan.save(plan_path)
        save_model(model, model_path)

        entry = IterationEntry(
            index=it,
            selections=selections,
            params_sparsity=ps,
            flops_sparsity=fs,
            score=score,
            plan_path=str(plan_path.relative_to(out_dir)),
            model_path=str(model_path.relative_to(out_dir)),
        )
        trace.entries.append(entry)
        trace.save()
        if on_iteration is not None:
            on_iteration(entry)

        if score < config.min_score:
            trace.stop_reason = "score_below_floor"
            trace.save()
            break
        if max(ps - prev_ps, fs - prev_fs) < config.min_new_sparsity:
            trace.stop_reason = "sparsity_stall"
            trace.save()
            break
        prev_ps, prev_fs = ps, fs
        current = model
    else:
        trace.stop_reason = "max_iterations"
        trace.save()
    return trace


def run(
    ir: NetworkIR,
    config: IterationConfig,
    out_dir: str | Path,
    seed: int = 0,
    jobs: int = 1,
    on_iteration=None,
) -> IterationTrace:
    """Full iterative loop from scratch; artifacts land in out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(ir, out_dir / "baseline.json")
    trace = IterationTrace(out_dir=out_dir, seed=seed, config_hash=config_hash(config, seed))
    trace.save()
    try:
        return _iterate(trace, ir, ir, config, jobs, on_iteration)
    except Exception:
        trace.stop_reason = "aborted"
        trace.save()
        raise


def resume(
    out_dir: str | Path, config: IterationConfig, jobs: int = 1, on_iteration=None
) -> IterationTrace:
    """Continue an interrupted run from its last completed iteration.

    No-op when the persisted trace already carries a terminal stop reason.
    Raises CorruptTrace when the persisted config hash does not match or a
    referenced model file is missing.
    """
    out_dir = Path(out_dir)
    trace = load_trace(out_dir)
    if trace.config_hash != config_hash(config, trace.seed):
        raise CorruptTrace("config does not match the one that produced this trace")
    if trace.stop_reason is not None and trace.stop_reason != "aborted":
        return trace
    trace.stop_reason = None

    try:
        original = load_model(out_dir / "baseline.json")
        if trace.entries:
            current = load_model(out_dir / trace.entries[-1].model_path)
        else:
            current = original
    except (IoError, ParseError) as e:
        raise CorruptTrace(f"cannot reload run state: {e}") from e

    try:
        return _iterate(trace, original, current, config, jobs, on_iteration)
    except Exception:
        trace.stop_reason = "aborted"
        trace.save()
        raise
