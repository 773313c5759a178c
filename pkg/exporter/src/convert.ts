/** Checkpoint -> toolkit model conversion (manifest JSON + raw f32 blob). */

import * as crypto from "crypto";
import * as fs from "fs";
import * as path from "path";

import { inferChannels, loadCheckpoint, tensorData } from "./checkpoint";
import {
  CheckpointNode,
  CheckpointParseError,
  DEFAULT_ALLOWLIST,
  LoadedCheckpoint,
  ShapeMismatchError,
  UnsupportedOperatorError,
} from "./types";

const MODEL_FORMAT = "concatprune-model";

/** Canonical tensor order per target kind; fixes the blob layout. */
const WEIGHT_ORDER: Record<string, string[]> = {
  Conv2D: ["weight", "bias"],
  BatchNorm2D: ["gamma", "beta", "running_mean", "running_var"],
};

export interface ExportJob {
  checkpointPath: string;
  outputName: string;
  /** source ops permitted; defaults to everything the converter understands */
  allowlist?: string[];
  log?: (line: string) => void;
}

export interface ExportResult {
  manifestPath: string;
  blobPath: string;
  layerCount: number;
  /** sha256 per source tensor, keyed "node.tensor" */
  checksums: Record<string, string>;
}

interface LayerEntry {
  id: number;
  kind: string;
  inputs: number[];
  attrs: Record<string, unknown>;
  weights: Record<string, { shape: number[]; offset: number }>;
  // staged data, written to the blob in layer order
  buffers: { name: string; shape: number[]; data: Float32Array }[];
}

function attrNumber(node: CheckpointNode, key: string, fallback: number): number {
  const v = node.attrs?.[key];
  if (v === undefined) return fallback;
  if (typeof v !== "number") {
    throw new CheckpointParseError(`node ${node.name}: attr ${key} must be a number`);
  }
  return v;
}

function requireTensor(loaded: LoadedCheckpoint, node: CheckpointNode, name: string) {
  const ref = node.tensors?.[name];
  if (!ref) {
    throw new ShapeMismatchError(`node ${node.name}: missing tensor "${name}"`);
  }
  return { ref, data: tensorData(loaded, ref) };
}

function convertNode(
  loaded: LoadedCheckpoint,
  node: CheckpointNode,
  id: number,
  inputIds: number[],
  inChannels: number
): LayerEntry {
  const entry: LayerEntry = { id, kind: "", inputs: inputIds, attrs: {}, weights: {}, buffers: [] };
  const stage = (name: string, shape: number[], data: Float32Array) => {
    entry.buffers.push({ name, shape, data });
  };

  switch (node.op) {
    case "Conv": {
      const w = requireTensor(loaded, node, "weight");
      if (w.ref.shape.length !== 4) {
        throw new ShapeMismatchError(`node ${node.name}: Conv weight must be 4-d`);
      }
      const [outC, inC, kh, kw] = w.ref.shape;
      if (inC !== inChannels) {
        throw new ShapeMismatchError(
          `node ${node.name}: weight expects ${inC} input channels, gets ${inChannels}`
        );
      }
      const bias = node.tensors?.bias;
      entry.kind = "Conv2D";
      entry.attrs = {
        out_channels: outC,
        in_channels: inC,
        kernel_h: kh,
        kernel_w: kw,
        stride: attrNumber(node, "stride", 1),
        padding: attrNumber(node, "padding", 0),
        has_bias: Boolean(bias),
      };
      stage("weight", w.ref.shape, w.data);
      if (bias) {
        const b = requireTensor(loaded, node, "bias");
        if (b.ref.shape.length !== 1 || b.ref.shape[0] !== outC) {
          throw new ShapeMismatchError(`node ${node.name}: bias must have shape [${outC}]`);
        }
        stage("bias", b.ref.shape, b.data);
      }
      break;
    }
    case "BatchNormalization": {
      const mapping: [string, string][] = [
        ["gamma", "scale"],
        ["beta", "bias"],
        ["running_mean", "mean"],
        ["running_var", "variance"],
      ];
      entry.kind = "BatchNorm2D";
      entry.attrs = { channels: inChannels, epsilon: attrNumber(node, "epsilon", 1e-5) };
      for (const [target, source] of mapping) {
        const t = requireTensor(loaded, node, source);
        if (t.ref.shape.length !== 1 || t.ref.shape[0] !== inChannels) {
          throw new ShapeMismatchError(
            `node ${node.name}: ${source} must have shape [${inChannels}]`
          );
        }
        stage(target, t.ref.shape, t.data);
      }
      break;
    }
    case "Relu":
      entry.kind = "Activation";
      entry.attrs = { function: "relu" };
      break;
    case "LeakyRelu": {
      const alpha = attrNumber(node, "alpha", 0.1);
      if (Math.abs(alpha - 0.1) > 1e-9) {
        throw new UnsupportedOperatorError([{ node: node.name, op: `LeakyRelu(alpha=${alpha})` }]);
      }
      entry.kind = "Activation";
      entry.attrs = { function: "leaky_relu" };
      break;
    }
    case "Silu":
      entry.kind = "Activation";
      entry.attrs = { function: "silu" };
      break;
    case "Relu6":
      entry.kind = "Activation";
      entry.attrs = { function: "relu6" };
      break;
    case "Concat": {
      const axis = attrNumber(node, "axis", 1);
      if (axis !== 1) {
        throw new UnsupportedOperatorError([{ node: node.name, op: `Concat(axis=${axis})` }]);
      }
      entry.kind = "Concat";
      break;
    }
    case "MaxPool": {
      entry.kind = "MaxPool2D";
      entry.attrs = {
        kernel: attrNumber(node, "kernel", 2),
        stride: attrNumber(node, "stride", 1),
      };
      const pad = attrNumber(node, "padding", 0);
      if (pad) entry.attrs.padding = pad;
      break;
    }
    case "Upsample": {
      const mode = (node.attrs?.mode as string) ?? "nearest";
      if (mode !== "nearest") {
        throw new UnsupportedOperatorError([{ node: node.name, op: `Upsample(mode=${mode})` }]);
      }
      const scale = attrNumber(node, "scale", 2);
      if (!Number.isInteger(scale) || scale < 1) {
        throw new CheckpointParseError(`node ${node.name}: scale must be a positive integer`);
      }
      entry.kind = "Upsample2D";
      entry.attrs = { scale };
      break;
    }
    case "Output":
      entry.kind = "Output";
      break;
    default:
      // callers reject unknown ops up front; this is a safety net
      throw new UnsupportedOperatorError([{ node: node.name, op: node.op }]);
  }
  return entry;
}

export function exportCheckpoint(job: ExportJob): ExportResult {
  const log = job.log ?? (() => {});
  const loaded = loadCheckpoint(job.checkpointPath);
  const allow = new Set(job.allowlist ?? DEFAULT_ALLOWLIST);

  const offenders = loaded.doc.nodes
    .filter((n) => !allow.has(n.op))
    .map((n) => ({ node: n.name, op: n.op }));
  if (offenders.length) {
    throw new UnsupportedOperatorError(offenders);
  }

  const channels = inferChannels(loaded.doc);
  const ids = new Map<string, number>();
  const layers: LayerEntry[] = [];
  loaded.doc.nodes.forEach((node, i) => {
    ids.set(node.name, i);
    const inputIds = node.inputs.map((n) => ids.get(n)!);
    const inChannels = node.inputs.length
      ? channels.get(node.inputs[0])!
      : loaded.doc.input.shape[0];
    layers.push(convertNode(loaded, node, i, inputIds, inChannels));
  });

  // blob layout: layer order, canonical tensor order within a layer
  const checksums: Record<string, string> = {};
  let offset = 0;
  const chunks: Buffer[] = [];
  for (const [i, layer] of layers.entries()) {
    const order = WEIGHT_ORDER[layer.kind] ?? [];
    layer.buffers.sort((a, b) => order.indexOf(a.name) - order.indexOf(b.name));
    for (const buf of layer.buffers) {
      const bytes = Buffer.from(buf.data.buffer, buf.data.byteOffset, buf.data.byteLength);
      layer.weights[buf.name] = { shape: buf.shape, offset };
      chunks.push(bytes);
      offset += bytes.byteLength;
      const digest = crypto.createHash("sha256").update(bytes).digest("hex");
      checksums[`${loaded.doc.nodes[i].name}.${buf.name}`] = digest;
      log(`tensor ${loaded.doc.nodes[i].name}.${buf.name} sha256=${digest}`);
    }
  }

  const manifestPath = `${job.outputName}.json`;
  const blobPath = `${job.outputName}.bin`;
  const manifest = {
    format: MODEL_FORMAT,
    version: 1,
    name: loaded.doc.name,
    input_shape: loaded.doc.input.shape,
    blob: path.basename(blobPath),
    layers: layers.map((l) => ({
      id: l.id,
      kind: l.kind,
      inputs: l.inputs,
      attrs: l.attrs,
      weights: l.weights,
    })),
  };
  fs.mkdirSync(path.dirname(path.resolve(manifestPath)), { recursive: true });
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + "\n", "utf-8");
  fs.writeFileSync(blobPath, Buffer.concat(chunks));
  log(`wrote ${manifestPath} (${layers.length} layers) and ${blobPath} (${offset} bytes)`);
  return { manifestPath, blobPath, layerCount: layers.length, checksums };
}
