"""Exception types raised across the toolkit."""


class PruneToolError(Exception):
    """Base class for all toolkit errors."""


class ParseError(PruneToolError):
    """Manifest or config file is malformed."""


class ShapeError(PruneToolError):
    """Channel or spatial dimensions are inconsistent."""

    def __init__(self, message: str, layer_id: int | None = None):
        super().__init__(message)
        self.layer_id = layer_id


class MissingWeight(PruneToolError):
    """A named weight tensor required by a layer is absent."""


class IoError(PruneToolError):
    """Reading or writing model files failed."""


class GraphError(PruneToolError):
    """Connectivity graph construction found irreconcilable slices."""


class UnsupportedTopology(PruneToolError):
    """The network uses a dependency structure outside the supported set."""


class UnknownVertex(PruneToolError):
    """Queried layer id is not a vertex of the connectivity graph."""


class MissingBatchNorm(PruneToolError):
    """A BN-based criterion was requested for a conv without a BN."""


class RateTooHigh(PruneToolError):
    """A pruning rate would remove every filter of a layer."""


class PlanGraphMismatch(PruneToolError):
    """A pruning plan does not correspond to the supplied model/graph."""


class OrphanBatchNorm(PruneToolError):
    """A BatchNorm layer does not directly follow a Conv2D layer."""


class MismatchedModels(PruneToolError):
    """Two cost reports cannot be diffed (different layer universes)."""


class CorruptTrace(PruneToolError):
    """A persisted iteration trace is unreadable or inconsistent."""
