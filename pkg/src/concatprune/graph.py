"""Layer connectivity graph over convolutional layers.

Vertices are Conv2D layer ids. An edge (x, y, slice_index) exists for every
path from conv x to conv y that crosses only non-conv layers; slice_index
identifies which concatenation slice of y's input carries x's output
(0 when no concatenation is crossed). Convs fed by a concatenation also
store the ordered slice sizes, from which the channel offset of any slice
is recovered.

Pooling, upsampling, activations and batch norm pass channels through
unchanged, so they are transparent to the traversal; nested concatenations
flatten into a single slice list on the consuming conv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import GraphError, UnknownVertex
from .ir import NetworkIR

# Producer id None marks channels coming straight from the network input.
_INPUT = None

_PASS_THROUGH = ("BatchNorm2D", "Activation", "MaxPool2D", "Upsample2D", "Output")


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    slice_index: int


@dataclass
class ConnectivityGraph:
    vertices: list[int]  # conv layer ids, ascending
    edges: list[Edge]  # sorted by (src, dst, slice_index)
    slice_sizes: dict[int, list[int]]  # conv id -> incoming concat slice sizes
    out_channels: dict[int, int] = field(default_factory=dict)

    def edges_from(self, src: int) -> list[Edge]:
        return [e for e in self.edges if e.src == src]

    def slice_offset(self, dst: int, slice_index: int) -> int:
        """Channel index where the given slice starts in dst's input."""
        if dst not in self.slice_sizes:
            return 0
        return sum(self.slice_sizes[dst][:slice_index])


def _resolve_slices(ir: NetworkIR, layer_id, memo: dict) -> list[tuple[int | None, int]]:
    """Ordered (producer conv id | None, channel count) slices of a tensor.

    Follows pass-through layers upward and flattens nested concatenations.
    """
    if layer_id is _INPUT:
        return [(_INPUT, ir.input_shape[0])]
    if layer_id in memo:
        return memo[layer_id]
    layer = ir.layer(layer_id)
    if layer.kind == "Conv2D":
        out = [(layer.id, layer.attrs["out_channels"])]
    elif layer.kind == "Concat":
        out = []
        for src in layer.inputs:
            out.extend(_resolve_slices(ir, src, memo))
    elif layer.kind in _PASS_THROUGH:
        src = layer.inputs[0] if layer.inputs else _INPUT
        out = _resolve_slices(ir, src, memo)
    else:
        raise GraphError(f"layer {layer_id}: unexpected kind {layer.kind!r}")
    memo[layer_id] = out
    return out


def build_graph(ir: NetworkIR) -> ConnectivityGraph:
    """Construct the connectivity graph for a validated network."""
    memo: dict = {}
    vertices = ir.conv_ids()
    out_channels = {v: ir.layer(v).attrs["out_channels"] for v in vertices}
    edges: list[Edge] = []
    slice_sizes: dict[int, list[int]] = {}

    for y in vertices:
        conv = ir.layer(y)
        src = conv.inputs[0] if conv.inputs else _INPUT
        slices = _resolve_slices(ir, src, memo)
        total = sum(size for _, size in slices)
        if total != conv.attrs["in_channels"]:
            raise GraphError(
                f"conv {y}: discovered slices sum to {total} channels, "
                f"layer declares in_channels={conv.attrs['in_channels']}"
            )
        if len(slices) > 1:
            slice_sizes[y] = [size for _, size in slices]
        for idx, (producer, _) in enumerate(slices):
            if producer is not _INPUT:
                edges.append(Edge(src=producer, dst=y, slice_index=idx))

    edges.sort(key=lambda e: (e.src, e.dst, e.slice_index))
    return ConnectivityGraph(
        vertices=vertices, edges=edges, slice_sizes=slice_sizes, out_channels=out_channels
    )


def affected_layers(g: ConnectivityGraph, x: int) -> list[tuple[int, int, int]]:
    """All (dst, slice_index, slice_offset) reached by pruning conv x.

    slice_offset is the channel index where x's slice starts inside dst's
    input. Ordered by ascending dst id, then slice index.
    """
    if x not in g.out_channels:
        raise UnknownVertex(f"layer {x} is not a vertex of the connectivity graph")
    out = []
    for e in g.edges:
        if e.src == x:
            out.append((e.dst, e.slice_index, g.slice_offset(e.dst, e.slice_index)))
    out.sort(key=lambda t: (t[0], t[1]))
    return out


def export_dot(g: ConnectivityGraph) -> str:
    """DOT digraph; node labels carry layer id and out_channels, edge labels
    the concatenation slice index."""
    lines = ["digraph connectivity {"]
    for v in g.vertices:
        lines.append(f'  {v} [label="conv{v}\\nout={g.out_channels[v]}"];')
    for e in g.edges:
        lines.append(f'  {e.src} -> {e.dst} [label="{e.slice_index}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
