"""Bundled network builders.

Weight blobs for the detector-scale configs run to hundreds of megabytes,
so instead of shipping files the zoo constructs models programmatically
with seeded weights. The CLI accepts `zoo:NAME` anywhere a model path is
expected; `save_model` materializes any of them to a manifest + blob pair.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError
from .ir import LayerSpec, NetworkIR, TensorBuf, validate


class NetBuilder:
    """Incremental construction of a NetworkIR with auto-assigned ids.

    Methods return the id of the last layer they appended (the activation
    for conv blocks), which is what later blocks reference.
    """

    def __init__(self, name: str, input_shape, seed: int = 0):
        self.name = name
        self.input_shape = list(input_shape)
        self.rng = np.random.default_rng(seed)
        self.layers: list[LayerSpec] = []
        self.channels: dict[int, int] = {}
        self._next = 0

    def _add(self, kind: str, inputs: list[int], attrs: dict, weights=None, channels: int = 0) -> int:
        lid = self._next
        self._next += 1
        self.layers.append(
            LayerSpec(id=lid, kind=kind, inputs=inputs, attrs=attrs, weights=weights or {})
        )
        self.channels[lid] = channels
        return lid

    def conv(
        self,
        src: int | None,
        out_c: int,
        k: int = 1,
        stride: int = 1,
        act: str | None = "silu",
        bn: bool = True,
        bias: bool = False,
        weight=None,
        bias_values=None,
    ) -> int:
        in_c = self.input_shape[0] if src is None else self.channels[src]
        pad = k // 2
        if weight is None:
            weight = (
                self.rng.standard_normal((out_c, in_c, k, k)) / np.sqrt(in_c * k * k)
            ).astype(np.float32)
        weights = {"weight": TensorBuf.from_array(weight)}
        if bias:
            if bias_values is None:
                bias_values = (0.01 * self.rng.standard_normal(out_c)).astype(np.float32)
            weights["bias"] = TensorBuf.from_array(np.asarray(bias_values, dtype=np.float32))
        lid = self._add(
            "Conv2D",
            [] if src is None else [src],
            {
                "out_channels": out_c,
                "in_channels": in_c,
                "kernel_h": k,
                "kernel_w": k,
                "stride": stride,
                "padding": pad,
                "has_bias": bool(bias),
            },
            weights,
            out_c,
        )
        if bn:
            lid = self._add(
                "BatchNorm2D",
                [lid],
                {"channels": out_c, "epsilon": 1e-5},
                {
                    "gamma": TensorBuf.from_array(self.rng.uniform(0.6, 1.4, out_c).astype(np.float32)),
                    "beta": TensorBuf.from_array((0.05 * self.rng.standard_normal(out_c)).astype(np.float32)),
                    "running_mean": TensorBuf.from_array((0.05 * self.rng.standard_normal(out_c)).astype(np.float32)),
                    "running_var": TensorBuf.from_array(self.rng.uniform(0.5, 1.5, out_c).astype(np.float32)),
                },
                out_c,
            )
        if act is not None:
            lid = self._add("Activation", [lid], {"function": act}, None, out_c)
        return lid

    def concat(self, srcs: list[int]) -> int:
        return self._add("Concat", list(srcs), {}, None, sum(self.channels[s] for s in srcs))

    def maxpool(self, src: int, k: int = 2, stride: int = 2, pad: int = 0) -> int:
        attrs = {"kernel": k, "stride": stride}
        if pad:
            attrs["padding"] = pad
        return self._add("MaxPool2D", [src], attrs, None, self.channels[src])

    def upsample(self, src: int, scale: int = 2) -> int:
        return self._add("Upsample2D", [src], {"scale": scale}, None, self.channels[src])

    def output(self, src: int) -> int:
        return self._add("Output", [src], {}, None, self.channels[src])

    def build(self) -> NetworkIR:
        ir = NetworkIR(name=self.name, input_shape=self.input_shape, layers=self.layers)
        validate(ir)
        return ir


def elan_example() -> NetworkIR:
    """The worked aggregation-block example: seven convolutions.

    Conv 4 feeds conv 5 directly and conv 7 through the second slice of the
    four-way concatenation (all branch widths 64), so pruning conv 4 must
    shift consumer kernel indices in conv 7 by 64.
    """
    b = NetBuilder("elan-example", [3, 32, 32], seed=7)
    stem = b.conv(None, 64, k=3, bn=False, act=None)  # 0
    a1 = b.conv(stem, 64, bn=False, act=None)  # 1
    a2 = b.conv(stem, 64, bn=False, act=None)  # 2
    a3 = b.conv(a2, 64, k=3, bn=False, act=None)  # 3
    a4 = b.conv(a3, 64, k=3, bn=False, act=None)  # 4
    a5 = b.conv(a4, 64, k=3, bn=False, act=None)  # 5
    cat = b.concat([a5, a4, a2, a1])  # 6
    a7 = b.conv(cat, 256, bn=False, act=None)  # 7
    b.output(a7)
    return b.build()


def _tiny_elan(b: NetBuilder, src: int, c_mid: int, c_out: int, act: str) -> int:
    p1 = b.conv(src, c_mid, 1, act=act)
    p2 = b.conv(src, c_mid, 1, act=act)
    p3 = b.conv(p2, c_mid, 3, act=act)
    p4 = b.conv(p3, c_mid, 3, act=act)
    cat = b.concat([p4, p3, p2, p1])
    return b.conv(cat, c_out, 1, act=act)


def yolov7_tiny_like(seed: int = 0, input_hw: int = 640, num_outputs: int = 255) -> NetworkIR:
    """Detector config in the tiny-variant style: 57 conv layers."""
    act = "leaky_relu"
    b = NetBuilder("yolov7-tiny-like", [3, input_hw, input_hw], seed=seed)
    x = b.conv(None, 32, 3, stride=2, act=act)
    x = b.conv(x, 64, 3, stride=2, act=act)
    e1 = _tiny_elan(b, x, 32, 64, act)
    e2 = _tiny_elan(b, b.maxpool(e1), 64, 128, act)
    e3 = _tiny_elan(b, b.maxpool(e2), 128, 256, act)
    e4 = _tiny_elan(b, b.maxpool(e3), 256, 512, act)

    # spatial pyramid over the deepest map
    s1 = b.conv(e4, 256, 1, act=act)
    pools = [b.maxpool(s1, k, 1, pad=k // 2) for k in (5, 9, 13)]
    s2 = b.conv(b.concat([s1, *pools]), 256, 1, act=act)
    s3 = b.conv(b.concat([s2, s1]), 256, 1, act=act)

    # top-down path
    f1 = b.conv(s3, 128, 1, act=act)
    r1 = b.conv(e3, 128, 1, act=act)
    h1 = _tiny_elan(b, b.concat([r1, b.upsample(f1)]), 64, 128, act)
    f2 = b.conv(h1, 64, 1, act=act)
    r2 = b.conv(e2, 64, 1, act=act)
    h2 = _tiny_elan(b, b.concat([r2, b.upsample(f2)]), 32, 64, act)

    # bottom-up path
    d1 = b.conv(h2, 128, 3, stride=2, act=act)
    h3 = _tiny_elan(b, b.concat([d1, h1]), 64, 128, act)
    d2 = b.conv(h3, 256, 3, stride=2, act=act)
    h4 = _tiny_elan(b, b.concat([d2, s3]), 128, 256, act)

    for feat, width in ((h2, 128), (h3, 256), (h4, 512)):
        stage = b.conv(feat, width, 3, act=act)
        det = b.conv(stage, num_outputs, 1, bn=False, act=None, bias=True)
        b.output(det)
    return b.build()


def _elan_backbone(b: NetBuilder, src: int, c_mid: int, c_out: int) -> int:
    p1 = b.conv(src, c_mid, 1)
    p2 = b.conv(src, c_mid, 1)
    p3 = b.conv(p2, c_mid, 3)
    p4 = b.conv(p3, c_mid, 3)
    p5 = b.conv(p4, c_mid, 3)
    p6 = b.conv(p5, c_mid, 3)
    cat = b.concat([p6, p4, p2, p1])
    return b.conv(cat, c_out, 1)


def _elan_head(b: NetBuilder, src: int, c1: int, c2: int, c_out: int) -> int:
    p1 = b.conv(src, c1, 1)
    p2 = b.conv(src, c1, 1)
    p3 = b.conv(p2, c2, 3)
    p4 = b.conv(p3, c2, 3)
    p5 = b.conv(p4, c2, 3)
    p6 = b.conv(p5, c2, 3)
    cat = b.concat([p6, p5, p4, p3, p2, p1])
    return b.conv(cat, c_out, 1)


def _downsample_pair(b: NetBuilder, src: int, c: int, extra: int | None = None) -> int:
    pooled = b.conv(b.maxpool(src), c, 1)
    strided = b.conv(b.conv(src, c, 1), c, 3, stride=2)
    srcs = [strided, pooled] + ([extra] if extra is not None else [])
    return b.concat(srcs)


def yolov7_like(seed: int = 0, input_hw: int = 640, num_outputs: int = 255) -> NetworkIR:
    """Detector config in the full-size style: 91 conv layers."""
    b = NetBuilder("yolov7-like", [3, input_hw, input_hw], seed=seed)
    x = b.conv(None, 32, 3)
    x = b.conv(x, 64, 3, stride=2)
    x = b.conv(x, 64, 3)
    x = b.conv(x, 128, 3, stride=2)
    e1 = _elan_backbone(b, x, 64, 256)
    e2 = _elan_backbone(b, _downsample_pair(b, e1, 128), 128, 512)
    e3 = _elan_backbone(b, _downsample_pair(b, e2, 256), 256, 1024)
    e4 = _elan_backbone(b, _downsample_pair(b, e3, 512), 256, 1024)

    # cross-stage spatial pyramid
    s1 = b.conv(e4, 512, 1)
    s3 = b.conv(s1, 512, 3)
    s4 = b.conv(s3, 512, 1)
    pools = [b.maxpool(s4, k, 1, pad=k // 2) for k in (5, 9, 13)]
    s5 = b.conv(b.concat([s4, *pools]), 512, 1)
    s6 = b.conv(s5, 512, 3)
    spp = b.conv(b.concat([s6, s1]), 512, 1)

    f1 = b.conv(spp, 256, 1)
    r1 = b.conv(e3, 256, 1)
    h1 = _elan_head(b, b.concat([r1, b.upsample(f1)]), 256, 128, 256)
    f2 = b.conv(h1, 128, 1)
    r2 = b.conv(e2, 128, 1)
    h2 = _elan_head(b, b.concat([r2, b.upsample(f2)]), 128, 64, 128)
    h3 = _elan_head(b, _downsample_pair(b, h2, 128, extra=h1), 256, 128, 256)
    h4 = _elan_head(b, _downsample_pair(b, h3, 256, extra=spp), 512, 256, 512)

    for feat, width in ((h2, 256), (h3, 512), (h4, 1024)):
        stage = b.conv(feat, width, 3)
        det = b.conv(stage, num_outputs, 1, bn=False, act=None, bias=True)
        b.output(det)
    return b.build()


def _tiered_weights(rng, out_c, in_c, k, tiers):
    """Filter rows in magnitude tiers: list of (count, scale)."""
    w = rng.standard_normal((out_c, in_c, k, k)).astype(np.float32) / np.sqrt(in_c * k * k)
    row = 0
    for count, scale in tiers:
        w[row : row + count] *= scale
        row += count
    assert row == out_c
    # shuffle rows so tier membership is not index-correlated
    perm = rng.permutation(out_c)
    return w[perm]


def toy_redundant(seed: int = 0) -> NetworkIR:
    """Small concat network whose layers carry dead / weak / strong filters.

    Half of each prunable conv's filters are numerically dead (1e-6 scale)
    and a quarter are weak (1e-3); removing them barely moves the outputs,
    which gives the iterative loop a big harmless first bite and a smaller
    second one.
    """
    rng = np.random.default_rng(seed)
    tiers = lambda n: [(n // 2, 1e-6), (n // 4, 1e-3), (n - n // 2 - n // 4, 1.0)]

    def tiered(out_c, in_c, k):
        return _tiered_weights(rng, out_c, in_c, k, tiers(out_c))

    def tiny_bias(n):
        return (1e-6 * rng.standard_normal(n)).astype(np.float32)

    b = NetBuilder("toy-redundant", [3, 12, 12], seed=seed + 1)
    c0 = b.conv(None, 16, 3, bn=False, act="relu", bias=True,
                weight=tiered(16, 3, 3), bias_values=tiny_bias(16))
    c1 = b.conv(c0, 16, 3, bn=False, act="relu", bias=True,
                weight=tiered(16, 16, 3), bias_values=tiny_bias(16))
    c2 = b.conv(c0, 16, 3, bn=False, act="relu", bias=True,
                weight=tiered(16, 16, 3), bias_values=tiny_bias(16))
    cat = b.concat([c1, c2])
    c3 = b.conv(cat, 16, 1, bn=False, act="relu", bias=True,
                weight=tiered(16, 32, 1), bias_values=tiny_bias(16))
    head = b.conv(c3, 8, 1, bn=False, act=None, bias=True)
    b.output(head)
    return b.build()


def toy_graded(seed: int = 0) -> NetworkIR:
    """Network whose first-layer filter magnitudes grade its contribution.

    Filter norms span two orders of magnitude while downstream kernels are
    uniform, so low-norm filters genuinely matter less: removing the small
    half hurts far less than removing the large half.
    """
    rng = np.random.default_rng(seed)
    out_c, in_c, k = 16, 3, 3
    w = rng.standard_normal((out_c, in_c, k, k)).astype(np.float32)
    w /= np.sqrt((w.reshape(out_c, -1) ** 2).sum(axis=1))[:, None, None, None]
    scales = np.geomspace(0.02, 2.0, out_c).astype(np.float32)
    w *= scales[:, None, None, None]

    b = NetBuilder("toy-graded", [3, 12, 12], seed=seed + 1)
    c0 = b.conv(None, out_c, k, bn=False, act="relu", bias=False, weight=w)
    c1 = b.conv(c0, 8, 1, bn=False, act="relu", bias=False)
    head = b.conv(c1, 4, 1, bn=False, act=None, bias=True)
    b.output(head)
    return b.build()


_REGISTRY = {
    "elan-example": elan_example,
    "yolov7": yolov7_like,
    "yolov7-tiny": yolov7_tiny_like,
    "toy-redundant": toy_redundant,
    "toy-graded": toy_graded,
}


def names() -> list[str]:
    return sorted(_REGISTRY)


def build(name: str, **kwargs) -> NetworkIR:
    if name not in _REGISTRY:
        raise ParseError(f"unknown zoo model {name!r}; available: {', '.join(names())}")
    return _REGISTRY[name](**kwargs)
