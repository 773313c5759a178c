"""Reference forward pass and the proxy fidelity score.

The forward engine is the correctness oracle for everything else, so it is
written for clarity, not speed: direct convolution (one matmul per kernel
tap), float64 accumulation, float32 results. Inputs/outputs are plain
(channels, height, width) numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import OrphanBatchNorm, ShapeError
from .ir import NetworkIR, TensorBuf


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    c_in, h, ww = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh * ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += w[:, :, i, j] @ patch.reshape(c_in, -1)
    out = out.reshape(c_out, oh, ow)
    if b is not None:
        out += b[:, None, None]
    return out


def _maxpool2d(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    out = np.full((c, oh, ow), -np.inf, dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            np.maximum(out, xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride], out=out)
    return out


def _activation(x: np.ndarray, fn: str) -> np.ndarray:
    if fn == "relu":
        return np.maximum(x, 0.0)
    if fn == "leaky_relu":
        return np.where(x > 0.0, x, 0.1 * x)
    if fn == "silu":
        return x / (1.0 + np.exp(-x))
    if fn == "relu6":
        return np.clip(x, 0.0, 6.0)
    raise ShapeError(f"unknown activation {fn!r}")


def _eval_layer(layer, srcs: list[np.ndarray]) -> np.ndarray:
    """One layer on already-computed float64 inputs (one array per input)."""
    k = layer.kind
    a = layer.attrs
    if k == "Conv2D":
        w = layer.weights["weight"].array().astype(np.float64)
        b = layer.weights["bias"].array().astype(np.float64) if a["has_bias"] else None
        return _conv2d(srcs[0], w, b, a["stride"], a["padding"])
    if k == "BatchNorm2D":
        g = layer.weights["gamma"].array().astype(np.float64)
        beta = layer.weights["beta"].array().astype(np.float64)
        mean = layer.weights["running_mean"].array().astype(np.float64)
        var = layer.weights["running_var"].array().astype(np.float64)
        scale = g / np.sqrt(var + a.get("epsilon", 1e-5))
        return (srcs[0] - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]
    if k == "Activation":
        return _activation(srcs[0], a["function"])
    if k == "Concat":
        return np.concatenate(srcs, axis=0)
    if k == "MaxPool2D":
        return _maxpool2d(srcs[0], a["kernel"], a["stride"], a.get("padding", 0))
    if k == "Upsample2D":
        return np.repeat(np.repeat(srcs[0], a["scale"], axis=1), a["scale"], axis=2)
    if k == "Output":
        return srcs[0]
    raise ShapeError(f"layer {layer.id}: cannot evaluate kind {k!r}")


def forward(ir: NetworkIR, x: np.ndarray | TensorBuf) -> dict[int, np.ndarray]:
    """Run the network on one input, returning every layer's output.

    Deterministic; activations are float32 arrays keyed by layer id.
    """
    if isinstance(x, TensorBuf):
        x = x.array()
    x = np.asarray(x, dtype=np.float64)
    if list(x.shape) != list(ir.input_shape):
        raise ShapeError(f"input shape {list(x.shape)} != model input {ir.input_shape}")

    acts: dict[int, np.ndarray] = {}
    for layer in ir.layers:
        srcs = [acts[i] for i in layer.inputs] if layer.inputs else [x]
        acts[layer.id] = _eval_layer(layer, srcs)
    return {i: a.astype(np.float32) for i, a in acts.items()}


def make_calibration(input_shape, count: int, seed: int) -> list[np.ndarray]:
    """Seeded synthetic calibration batch: standard-normal inputs."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    return [rng.standard_normal((c, h, w)).astype(np.float32) for _ in range(count)]


def proxy_score(pruned: NetworkIR, reference: NetworkIR, calibration: list[np.ndarray]) -> float:
    """Fidelity of pruned-model outputs to reference-model outputs in (0, 1].

    Per output layer: 1 / (1 + MSE over the calibration batch); the score is
    the mean over output layers. Equals 1.0 exactly when outputs coincide.
    """
    out_p = pruned.output_ids()
    out_r = reference.output_ids()
    if list(pruned.input_shape) != list(reference.input_shape):
        raise ShapeError("models disagree on input shape")
    if len(out_p) != len(out_r):
        raise ShapeError(f"output arity mismatch: {len(out_p)} vs {len(out_r)}")
    if not out_p:
        raise ShapeError("models have no Output layers to compare")

    sq_sum = np.zeros(len(out_p))
    n_elem = np.zeros(len(out_p))
    for x in calibration:
        acts_p = forward(pruned, x)
        acts_r = forward(reference, x)
        for k, (ip, ir_) in enumerate(zip(out_p, out_r)):
            a, b = acts_p[ip], acts_r[ir_]
            if a.shape != b.shape:
                raise ShapeError(f"output {ip}: shape {a.shape} vs {b.shape}")
            d = a.astype(np.float64) - b.astype(np.float64)
            sq_sum[k] += float(np.sum(d * d))
            n_elem[k] += d.size
    mse = sq_sum / n_elem
    return float(np.mean(1.0 / (1.0 + mse)))


def recalibrate_bn(ir: NetworkIR, calibration: list[np.ndarray]) -> NetworkIR:
    """Replace BN running statistics with the calibration batch's statistics.

    Streams the batch through the network in layer order, updating each BN
    from the activations it actually receives (earlier updates included),
    which is equivalent to recomputing stats layer by layer. Weights are
    untouched.
    """
    if not any(l.kind == "BatchNorm2D" for l in ir.layers):
        raise OrphanBatchNorm("model has no BatchNorm2D layers to recalibrate")
    out = ir.copy()
    batch = [np.asarray(x, dtype=np.float64) for x in calibration]
    acts: dict[int, list[np.ndarray]] = {}

    for layer in out.layers:
        if layer.kind == "BatchNorm2D":
            stacked = np.stack(acts[layer.inputs[0]])  # (batch, c, h, w)
            mean = stacked.mean(axis=(0, 2, 3))
            var = stacked.var(axis=(0, 2, 3))
            layer.weights["running_mean"] = TensorBuf.from_array(mean.astype(np.float32))
            layer.weights["running_var"] = TensorBuf.from_array(var.astype(np.float32))
        acts[layer.id] = [
            _eval_layer(layer, [acts[i][bi] for i in layer.inputs] if layer.inputs else [x])
            for bi, x in enumerate(batch)
        ]
    return out
