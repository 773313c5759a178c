"""Model persistence: JSON manifest plus raw little-endian float32 blob.

File pair convention: `<name>.json` next to `<name>.bin`. Tensor bytes are
laid out in layer order, weights in the canonical per-kind order, with no
padding, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import IoError, MissingWeight, ParseError
from .ir import KINDS, ADD_STYLE_KINDS, WEIGHT_ORDER, LayerSpec, NetworkIR, TensorBuf, validate
from .errors import UnsupportedTopology

FORMAT_TAG = "concatprune-model"
FORMAT_VERSION = 1


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _weight_names(layer: LayerSpec) -> list[str]:
    order = WEIGHT_ORDER.get(layer.kind, ())
    names = [n for n in order if n in layer.weights]
    # any extra names (none expected) go last, sorted, to keep layout total
    names += sorted(n for n in layer.weights if n not in order)
    return names


def save_model(ir: NetworkIR, manifest_path: str | Path) -> None:
    """Write `<name>.json` + `<name>.bin`. Deterministic byte layout."""
    validate(ir)
    manifest_path = Path(manifest_path)
    chunks: list[np.ndarray] = []
    offset = 0
    layer_entries = []
    for layer in ir.layers:
        wmeta = {}
        for name in _weight_names(layer):
            buf = layer.weights[name]
            wmeta[name] = {"shape": list(buf.shape), "offset": offset}
            data = buf.data.astype("<f4", copy=False)
            chunks.append(data)
            offset += data.nbytes
        layer_entries.append(
            {
                "id": layer.id,
                "kind": layer.kind,
                "inputs": list(layer.inputs),
                "attrs": dict(layer.attrs),
                "weights": wmeta,
            }
        )
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "name": ir.name,
        "input_shape": list(ir.input_shape),
        "blob": blob_path(manifest_path).name,
        "layers": layer_entries,
    }
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        with open(blob_path(manifest_path), "wb") as f:
            for chunk in chunks:
                f.write(chunk.tobytes())
    except OSError as e:
        raise IoError(f"cannot write model files: {e}") from e


def load_model(manifest_path: str | Path) -> NetworkIR:
    """Load and validate a manifest + blob pair."""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read manifest: {e}") from e
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: invalid JSON: {e}") from e

    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise ParseError(f"{manifest_path}: not a {FORMAT_TAG} manifest")
    for key in ("name", "input_shape", "blob", "layers"):
        if key not in manifest:
            raise ParseError(f"{manifest_path}: missing key {key!r}")

    bpath = manifest_path.parent / manifest["blob"]
    try:
        raw = np.fromfile(bpath, dtype="<f4")
    except OSError as e:
        raise IoError(f"cannot read blob: {e}") from e
    nbytes = raw.size * 4

    layers = []
    for entry in manifest["layers"]:
        try:
            lid = int(entry["id"])
            kind = entry["kind"]
            inputs = [int(i) for i in entry["inputs"]]
            attrs = dict(entry.get("attrs", {}))
            wmeta = entry.get("weights", {})
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{manifest_path}: malformed layer entry: {e}") from e
        if kind in ADD_STYLE_KINDS:
            raise UnsupportedTopology(
                f"layer {lid}: element-wise {kind!r} dependencies are not supported"
            )
        if kind not in KINDS:
            raise ParseError(f"layer {lid}: unknown kind {kind!r}")
        weights = {}
        for name, meta in wmeta.items():
            shape = [int(d) for d in meta["shape"]]
            off = int(meta["offset"])
            count = int(np.prod(shape))
            if off % 4 != 0 or off + 4 * count > nbytes:
                raise ParseError(
                    f"layer {lid}: tensor {name!r} at offset {off} runs past blob end"
                )
            weights[name] = TensorBuf(shape=shape, data=raw[off // 4 : off // 4 + count].copy())
        # required tensors present?
        for name in _required_weights(kind, attrs):
            if name not in weights:
                raise MissingWeight(f"layer {lid}: named tensor {name!r} absent from manifest")
        layers.append(LayerSpec(id=lid, kind=kind, inputs=inputs, attrs=attrs, weights=weights))

    for l in layers:
        if l.kind == "BatchNorm2D":
            l.attrs.setdefault("epsilon", 1e-5)

    ir = NetworkIR(
        name=str(manifest["name"]),
        input_shape=[int(d) for d in manifest["input_shape"]],
        layers=layers,
    )
    validate(ir)
    return ir


def _required_weights(kind: str, attrs: dict) -> tuple[str, ...]:
    if kind == "Conv2D":
        return ("weight", "bias") if attrs.get("has_bias") else ("weight",)
    if kind == "BatchNorm2D":
        return WEIGHT_ORDER["BatchNorm2D"]
    return ()
