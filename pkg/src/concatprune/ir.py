"""Network intermediate representation: layer specs, tensors, shape inference.

A network is a flat, topologically ordered list of layers with explicit
input ids. Layer ids are stable identifiers: they stay unchanged across
pruning and BN fusion, so plans and reports written against one model
revision still address the same layers in the next.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError

KINDS = ("Conv2D", "BatchNorm2D", "Activation", "Concat", "MaxPool2D", "Upsample2D", "Output")

# Add-style skip connections are a recognized-but-unsupported topology,
# distinct from a typo'd kind name.
ADD_STYLE_KINDS = ("Add", "Sum", "Eltwise", "EltwiseAdd", "Shortcut", "Residual")

ACTIVATIONS = ("relu", "leaky_relu", "silu", "relu6")

# Canonical per-kind weight ordering; drives blob layout and validation.
WEIGHT_ORDER = {
    "Conv2D": ("weight", "bias"),
    "BatchNorm2D": ("gamma", "beta", "running_mean", "running_var"),
}


@dataclass
class TensorBuf:
    """Flat row-major float32 buffer plus its logical shape."""

    shape: list[int]
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        n = 1
        for d in self.shape:
            if d < 1:
                raise ShapeError(f"tensor dimension {d} < 1")
            n *= d
        if n != self.data.size:
            raise ShapeError(f"shape {self.shape} holds {n} values, buffer has {self.data.size}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorBuf":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(shape=list(arr.shape), data=arr.reshape(-1))

    def array(self) -> np.ndarray:
        """Shaped float32 view of the buffer."""
        return self.data.reshape(self.shape)

    def copy(self) -> "TensorBuf":
        return TensorBuf(shape=list(self.shape), data=self.data.copy())


@dataclass
class LayerSpec:
    id: int
    kind: str
    inputs: list[int]
    attrs: dict = field(default_factory=dict)
    weights: dict[str, TensorBuf] = field(default_factory=dict)

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            id=self.id,
            kind=self.kind,
            inputs=list(self.inputs),
            attrs=dict(self.attrs),
            weights={k: v.copy() for k, v in self.weights.items()},
        )


@dataclass
class NetworkIR:
    name: str
    input_shape: list[int]  # [channels, height, width]
    layers: list[LayerSpec]

    def __post_init__(self):
        self._by_id = {l.id: l for l in self.layers}

    def layer(self, layer_id: int) -> LayerSpec:
        return self._by_id[layer_id]

    def has_layer(self, layer_id: int) -> bool:
        return layer_id in self._by_id

    def conv_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind == "Conv2D"]

    def output_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind == "Output"]

    def consumers(self) -> dict[int, list[int]]:
        """Map layer id -> ids of layers consuming its output, in list order."""
        out: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                out[src].append(l.id)
        return out

    def bn_after(self, conv_id: int) -> LayerSpec | None:
        """The BatchNorm2D layer consuming conv_id directly, if any."""
        for l in self.layers:
            if l.kind == "BatchNorm2D" and l.inputs == [conv_id]:
                return l
        return None

    def copy(self) -> "NetworkIR":
        return NetworkIR(
            name=self.name,
            input_shape=list(self.input_shape),
            layers=[l.copy() for l in self.layers],
        )


def _conv_spatial(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(ir: NetworkIR) -> dict[int, tuple[int, int, int]]:
    """Per-layer output shapes (channels, height, width).

    Raises ShapeError naming the offending layer on any inconsistency.
    """
    shapes: dict[int, tuple[int, int, int]] = {}
    for layer in ir.layers:
        if layer.inputs:
            ins = [shapes[i] for i in layer.inputs]
        else:
            ins = [tuple(ir.input_shape)]
        c, h, w = ins[0]
        k = layer.kind
        if k == "Conv2D":
            a = layer.attrs
            if a["in_channels"] != c:
                raise ShapeError(
                    f"layer {layer.id}: declares in_channels={a['in_channels']} "
                    f"but receives {c} channels",
                    layer_id=layer.id,
                )
            oh = _conv_spatial(h, a["kernel_h"], a["stride"], a["padding"])
            ow = _conv_spatial(w, a["kernel_w"], a["stride"], a["padding"])
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {layer.id}: output spatial {oh}x{ow}", layer_id=layer.id)
            shapes[layer.id] = (a["out_channels"], oh, ow)
        elif k == "BatchNorm2D":
            if layer.attrs["channels"] != c:
                raise ShapeError(
                    f"layer {layer.id}: BN channels={layer.attrs['channels']}, input has {c}",
                    layer_id=layer.id,
                )
            shapes[layer.id] = (c, h, w)
        elif k == "Activation":
            shapes[layer.id] = (c, h, w)
        elif k == "Concat":
            for other in ins[1:]:
                if other[1:] != (h, w):
                    raise ShapeError(
                        f"layer {layer.id}: concat spatial mismatch {ins}", layer_id=layer.id
                    )
            shapes[layer.id] = (sum(s[0] for s in ins), h, w)
        elif k == "MaxPool2D":
            a = layer.attrs
            pad = a.get("padding", 0)
            oh = _conv_spatial(h, a["kernel"], a["stride"], pad)
            ow = _conv_spatial(w, a["kernel"], a["stride"], pad)
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {layer.id}: pooled to {oh}x{ow}", layer_id=layer.id)
            shapes[layer.id] = (c, oh, ow)
        elif k == "Upsample2D":
            s = layer.attrs["scale"]
            shapes[layer.id] = (c, h * s, w * s)
        elif k == "Output":
            shapes[layer.id] = (c, h, w)
        else:
            raise ParseError(f"layer {layer.id}: unknown kind {k!r}")
    return shapes


def validate(ir: NetworkIR) -> None:
    """Check structural invariants, then run shape inference.

    Topological id order, input arity per kind, weight presence and shapes,
    BN-follows-conv. Raises ParseError / ShapeError / MissingWeight.
    """
    from .errors import MissingWeight, OrphanBatchNorm, UnsupportedTopology

    if len(ir.input_shape) != 3 or any(d < 1 for d in ir.input_shape):
        raise ParseError(f"bad input_shape {ir.input_shape}")
    if not ir.layers:
        raise ParseError("model has no layers")

    seen: set[int] = set()
    prev_id = -1
    bn_owner: set[int] = set()
    for pos, layer in enumerate(ir.layers):
        if layer.kind in ADD_STYLE_KINDS:
            raise UnsupportedTopology(
                f"layer {layer.id}: element-wise {layer.kind!r} dependencies are not supported"
            )
        if layer.kind not in KINDS:
            raise ParseError(f"layer {layer.id}: unknown kind {layer.kind!r}")
        if layer.id < 0:
            raise ParseError(f"negative layer id {layer.id}")
        if layer.id <= prev_id:
            raise ParseError(f"layer ids must be strictly increasing, {layer.id} after {prev_id}")
        prev_id = layer.id
        for src in layer.inputs:
            if src not in seen:
                raise ParseError(f"layer {layer.id}: input {src} is not an earlier layer")
        seen.add(layer.id)

        n_in = len(layer.inputs)
        if pos == 0:
            if n_in != 0:
                raise ParseError(f"first layer {layer.id} must read the network input")
        elif layer.kind == "Concat":
            if n_in < 2:
                raise ParseError(f"layer {layer.id}: Concat needs >= 2 inputs, has {n_in}")
        elif n_in != 1:
            raise ParseError(f"layer {layer.id}: {layer.kind} needs exactly 1 input, has {n_in}")

        if layer.kind == "Conv2D":
            a = layer.attrs
            for key in ("out_channels", "in_channels", "kernel_h", "kernel_w", "stride", "padding", "has_bias"):
                if key not in a:
                    raise ParseError(f"layer {layer.id}: Conv2D missing attr {key!r}")
            w = layer.weights.get("weight")
            if w is None:
                raise MissingWeight(f"layer {layer.id}: Conv2D has no 'weight' tensor")
            expect = [a["out_channels"], a["in_channels"], a["kernel_h"], a["kernel_w"]]
            if w.shape != expect:
                raise ShapeError(
                    f"layer {layer.id}: weight shape {w.shape} != {expect}", layer_id=layer.id
                )
            if a["has_bias"]:
                b = layer.weights.get("bias")
                if b is None:
                    raise MissingWeight(f"layer {layer.id}: has_bias set but no 'bias' tensor")
                if b.shape != [a["out_channels"]]:
                    raise ShapeError(f"layer {layer.id}: bias shape {b.shape}", layer_id=layer.id)
        elif layer.kind == "BatchNorm2D":
            c = layer.attrs.get("channels")
            if c is None:
                raise ParseError(f"layer {layer.id}: BatchNorm2D missing attr 'channels'")
            for name in WEIGHT_ORDER["BatchNorm2D"]:
                t = layer.weights.get(name)
                if t is None:
                    raise MissingWeight(f"layer {layer.id}: BatchNorm2D has no {name!r} tensor")
                if t.shape != [c]:
                    raise ShapeError(f"layer {layer.id}: {name} shape {t.shape}", layer_id=layer.id)
            producer = ir.layer(layer.inputs[0])
            if producer.kind != "Conv2D":
                raise OrphanBatchNorm(
                    f"layer {layer.id}: BatchNorm2D follows {producer.kind}, not Conv2D"
                )
            if producer.id in bn_owner:
                raise ParseError(
                    f"layer {layer.id}: conv {producer.id} already feeds another BatchNorm2D"
                )
            bn_owner.add(producer.id)
            if producer.attrs["out_channels"] != c:
                raise ShapeError(
                    f"layer {layer.id}: BN channels {c} != conv {producer.id} out_channels",
                    layer_id=layer.id,
                )
        elif layer.kind == "Activation":
            fn = layer.attrs.get("function")
            if fn not in ACTIVATIONS:
                raise ParseError(f"layer {layer.id}: unknown activation {fn!r}")
        elif layer.kind == "Upsample2D":
            s = layer.attrs.get("scale")
            if not isinstance(s, int) or s < 1:
                raise ParseError(f"layer {layer.id}: bad upsample scale {s!r}")
        elif layer.kind == "MaxPool2D":
            for key in ("kernel", "stride"):
                if key not in layer.attrs:
                    raise ParseError(f"layer {layer.id}: MaxPool2D missing attr {key!r}")

    infer_shapes(ir)
