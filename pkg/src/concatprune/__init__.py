"""Structured filter pruning for concatenation-based CNN architectures."""

from .errors import (
    CorruptTrace,
    GraphError,
    IoError,
    MismatchedModels,
    MissingBatchNorm,
    MissingWeight,
    OrphanBatchNorm,
    ParseError,
    PlanGraphMismatch,
    PruneToolError,
    RateTooHigh,
    ShapeError,
    UnknownVertex,
    UnsupportedTopology,
)
from .ir import LayerSpec, NetworkIR, TensorBuf, infer_shapes, validate
from .storage import load_model, save_model
from .graph import ConnectivityGraph, Edge, affected_layers, build_graph, export_dot
from .pruning import (
    Criterion,
    PrunedModel,
    PruningPlan,
    apply_plan,
    fuse_bn,
    prune_after_fusion,
    prune_before_fusion,
    score_filters,
    select_filters,
)
from .costs import (
    CostReport,
    cost_report,
    count_flops,
    count_params,
    diff_reports,
    predict_after_prune,
)
from .evaluate import forward, make_calibration, proxy_score, recalibrate_bn
from .sensitivity import (
    SelectionConfig,
    SensitivityRecord,
    default_exclusions,
    select,
    sweep,
    v_value,
)
from .orchestrate import IterationConfig, IterationTrace, resume, run

__version__ = "0.1.0"
