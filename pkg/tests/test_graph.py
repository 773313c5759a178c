"""Connectivity graph: construction, slice offsets, DOT export.

The brute-force oracle for the affected set freezes every conv's output to
a stored random constant, bumps one channel of the probed conv by a large
marker, and propagates through the non-conv layers only. Convs whose input
tensor changes are exactly the direct consumers, and the changed channel
positions are the slice offsets, so the oracle checks both without reusing
any traversal logic from the implementation.
"""

import numpy as np
import pytest

from concatprune import (
    GraphError,
    NetworkIR,
    UnknownVertex,
    affected_layers,
    build_graph,
    export_dot,
    infer_shapes,
)
from concatprune.ir import LayerSpec, TensorBuf
from concatprune.zoo import NetBuilder, elan_example

from netgen import random_network


def brute_force_affected(ir: NetworkIR, probe: int, seed: int = 0):
    """Returns (probed channel, {affected conv id: changed input channels})."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(ir)
    consts = {
        l.id: rng.uniform(-2.0, 2.0, size=shapes[l.id]) for l in ir.layers if l.kind == "Conv2D"
    }
    x0 = rng.standard_normal(ir.input_shape)  # only reaches input-fed convs
    channel = int(rng.integers(ir.layer(probe).attrs["out_channels"]))

    def run(perturb: bool):
        acts, conv_in = {}, {}
        for layer in ir.layers:
            srcs = [acts[i] for i in layer.inputs] if layer.inputs else [x0]
            k = layer.kind
            if k == "Conv2D":
                conv_in[layer.id] = srcs[0]
                out = consts[layer.id].copy()
                if perturb and layer.id == probe:
                    out[channel] += 1000.0
            elif k == "Concat":
                out = np.concatenate(srcs, axis=0)
            elif k == "BatchNorm2D":
                g = layer.weights["gamma"].array()
                out = srcs[0] * g[:, None, None] + 0.25
            elif k == "Activation":
                fn = layer.attrs["function"]
                out = np.clip(srcs[0], -1e9, 6.0) if fn == "relu6" else np.tanh(srcs[0]) + srcs[0]
            elif k == "MaxPool2D":
                from concatprune.evaluate import _maxpool2d

                a = layer.attrs
                out = _maxpool2d(srcs[0], a["kernel"], a["stride"], a.get("padding", 0))
            elif k == "Upsample2D":
                s = layer.attrs["scale"]
                out = np.repeat(np.repeat(srcs[0], s, axis=1), s, axis=2)
            else:  # Output
                out = srcs[0]
            acts[layer.id] = out
        return conv_in

    base = run(False)
    bumped = run(True)
    hits = {}
    for cid in base:
        changed = {
            int(c)
            for c in range(base[cid].shape[0])
            if not np.array_equal(base[cid][c], bumped[cid][c])
        }
        if changed:
            hits[cid] = changed
    return channel, hits


class TestElanExample:
    def test_edges_and_slices(self):
        g = build_graph(elan_example())
        pairs = {(e.src, e.dst): e.slice_index for e in g.edges}
        assert pairs[(4, 5)] == 0
        assert pairs[(4, 7)] == 1
        assert g.slice_sizes[7][1] == 64

    def test_affected_with_offsets(self):
        g = build_graph(elan_example())
        assert affected_layers(g, 4) == [(5, 0, 0), (7, 1, 64)]

    def test_seven_vertices(self):
        g = build_graph(elan_example())
        assert len(g.vertices) == 7


class TestChains:
    def test_plain_chain_edge(self):
        b = NetBuilder("chain", [3, 8, 8], seed=0)
        c1 = b.conv(None, 8, 3, bn=False, act=None)
        c2 = b.conv(c1, 4, 3, bn=False, act=None)
        g = build_graph(b.build())
        assert [(e.src, e.dst, e.slice_index) for e in g.edges] == [(c1, c2, 0)]
        assert g.slice_sizes == {}

    def test_terminal_conv_has_no_consumers(self):
        b = NetBuilder("chain", [3, 8, 8], seed=0)
        c1 = b.conv(None, 8, 3, bn=False, act=None)
        c2 = b.conv(c1, 4, 3, bn=False, act=None)
        g = build_graph(b.build())
        assert affected_layers(g, c2) == []

    def test_unknown_vertex(self):
        g = build_graph(elan_example())
        with pytest.raises(UnknownVertex):
            affected_layers(g, 999)

    def test_conv_feeding_slice_and_direct_consumer(self):
        # one producer reaches y0 directly and z through a concat slice
        b = NetBuilder("mixed", [3, 8, 8], seed=0)
        c1 = b.conv(None, 8, 3, bn=False, act=None)
        c2 = b.conv(c1, 6, 1, bn=False, act=None)  # direct consumer
        cat = b.concat([c2, c1])
        c3 = b.conv(cat, 5, 1, bn=False, act=None)
        g = build_graph(b.build())
        assert affected_layers(g, c1) == [(c2, 0, 0), (c3, 1, 6)]

    def test_repeated_concat_input_yields_two_edges(self):
        b = NetBuilder("rep", [3, 8, 8], seed=0)
        c1 = b.conv(None, 8, 3, bn=False, act=None)
        cat = b.concat([c1, c1])
        c2 = b.conv(cat, 4, 1, bn=False, act=None)
        g = build_graph(b.build())
        assert affected_layers(g, c1) == [(c2, 0, 0), (c2, 1, 8)]

    def test_nested_concat_flattens(self):
        b = NetBuilder("nest", [3, 8, 8], seed=0)
        c1 = b.conv(None, 4, 1, bn=False, act=None)
        c2 = b.conv(c1, 5, 1, bn=False, act=None)
        cat1 = b.concat([c1, c2])
        c3 = b.conv(c1, 6, 1, bn=False, act=None)
        cat2 = b.concat([cat1, c3])
        c4 = b.conv(cat2, 4, 1, bn=False, act=None)
        g = build_graph(b.build())
        assert g.slice_sizes[c4] == [4, 5, 6]
        assert (c1, c4) in {(e.src, e.dst) for e in g.edges}

    def test_graph_error_on_unreconciled_channels(self):
        # hand-built (unvalidated) IR: conv declares the wrong in_channels
        w1 = TensorBuf.from_array(np.zeros((8, 3, 1, 1), dtype=np.float32))
        w2 = TensorBuf.from_array(np.zeros((4, 6, 1, 1), dtype=np.float32))
        conv_attrs = dict(kernel_h=1, kernel_w=1, stride=1, padding=0, has_bias=False)
        layers = [
            LayerSpec(0, "Conv2D", [], dict(conv_attrs, out_channels=8, in_channels=3), {"weight": w1}),
            LayerSpec(1, "Conv2D", [0], dict(conv_attrs, out_channels=4, in_channels=6), {"weight": w2}),
        ]
        with pytest.raises(GraphError):
            build_graph(NetworkIR("bad", [3, 8, 8], layers))


class TestBruteForceOracle:
    def test_affected_sets_match_dense_probe(self):
        for seed in range(40):
            ir = random_network(seed)
            g = build_graph(ir)
            for probe in g.vertices:
                got = affected_layers(g, probe)
                ch, hits = brute_force_affected(ir, probe, seed=seed)
                expect = {}
                for dst, _, offset in got:
                    expect.setdefault(dst, set()).add(offset + ch)
                assert hits == expect, (seed, probe)

    def test_offset_consistency(self):
        for seed in range(40):
            ir = random_network(seed)
            g = build_graph(ir)
            for v in g.vertices:
                for dst, idx, offset in affected_layers(g, v):
                    in_c = ir.layer(dst).attrs["in_channels"]
                    if dst in g.slice_sizes:
                        assert offset + g.slice_sizes[dst][idx] <= in_c
                    else:
                        assert offset == 0

    def test_determinism(self):
        ir = random_network(11)
        g1, g2 = build_graph(ir), build_graph(ir)
        assert g1.edges == g2.edges
        assert g1.slice_sizes == g2.slice_sizes
        assert g1.vertices == g2.vertices


class TestDot:
    def test_empty_graph(self):
        from concatprune.graph import ConnectivityGraph

        dot = export_dot(ConnectivityGraph(vertices=[], edges=[], slice_sizes={}))
        assert dot.startswith("digraph")
        assert "->" not in dot

    def test_elan_labels(self):
        dot = export_dot(build_graph(elan_example()))
        assert '4 -> 7 [label="1"]' in dot
        assert dot.count("label=") >= 7 + 8  # 7 node labels + 8 edges

    def test_three_conv_chain(self):
        b = NetBuilder("c3", [3, 8, 8], seed=0)
        c1 = b.conv(None, 4, 1, bn=False, act=None)
        c2 = b.conv(c1, 4, 1, bn=False, act=None)
        b.conv(c2, 4, 1, bn=False, act=None)
        dot = export_dot(build_graph(b.build()))
        assert dot.count('[label="0"]') == 2
