/** Checkpoint loading and structural validation. */

import * as fs from "fs";
import * as path from "path";

import {
  Checkpoint,
  CheckpointNode,
  CheckpointParseError,
  LoadedCheckpoint,
  ShapeMismatchError,
  TensorRef,
} from "./types";

export const CHECKPOINT_FORMAT = "cnn-checkpoint";

function bad(msg: string): never {
  throw new CheckpointParseError(msg);
}

export function loadCheckpoint(jsonPath: string): LoadedCheckpoint {
  let text: string;
  try {
    text = fs.readFileSync(jsonPath, "utf-8");
  } catch (e) {
    bad(`cannot read checkpoint: ${(e as Error).message}`);
  }
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (e) {
    bad(`${jsonPath}: invalid JSON: ${(e as Error).message}`);
  }
  const ckpt = validateDocument(doc, jsonPath);
  const weightsPath = path.resolve(path.dirname(jsonPath), ckpt.weights);
  let raw: Buffer;
  try {
    raw = fs.readFileSync(weightsPath);
  } catch (e) {
    bad(`cannot read weights file: ${(e as Error).message}`);
  }
  if (raw.byteLength % 4 !== 0) {
    bad(`${ckpt.weights}: byte length ${raw.byteLength} is not a multiple of 4`);
  }
  const data = new Float32Array(raw.buffer, raw.byteOffset, raw.byteLength / 4);
  validateTensorBounds(ckpt, raw.byteLength);
  return { doc: ckpt, data, weightsPath };
}

function validateDocument(doc: unknown, where: string): Checkpoint {
  if (typeof doc !== "object" || doc === null) bad(`${where}: not a JSON object`);
  const d = doc as Record<string, unknown>;
  if (d.format !== CHECKPOINT_FORMAT) bad(`${where}: format must be "${CHECKPOINT_FORMAT}"`);
  if (typeof d.name !== "string") bad(`${where}: missing model name`);
  if (typeof d.weights !== "string") bad(`${where}: missing weights path`);
  const input = d.input as { shape?: unknown } | undefined;
  if (
    !input ||
    !Array.isArray(input.shape) ||
    input.shape.length !== 3 ||
    input.shape.some((v) => !Number.isInteger(v) || (v as number) < 1)
  ) {
    bad(`${where}: input.shape must be [channels, height, width]`);
  }
  if (!Array.isArray(d.nodes) || d.nodes.length === 0) bad(`${where}: nodes array missing`);

  const seen = new Set<string>();
  d.nodes.forEach((n, i) => {
    const node = n as CheckpointNode;
    if (typeof node.name !== "string" || node.name.length === 0) bad(`node ${i}: missing name`);
    if (seen.has(node.name)) bad(`node ${node.name}: duplicate name`);
    if (typeof node.op !== "string") bad(`node ${node.name}: missing op`);
    if (!Array.isArray(node.inputs)) bad(`node ${node.name}: missing inputs`);
    if (i === 0 && node.inputs.length !== 0) {
      bad(`node ${node.name}: the first node must read the network input`);
    }
    if (i > 0 && node.inputs.length === 0) {
      bad(`node ${node.name}: only the first node may have no inputs`);
    }
    for (const src of node.inputs) {
      if (!seen.has(src)) bad(`node ${node.name}: input "${src}" is not an earlier node`);
    }
    for (const [tname, ref] of Object.entries(node.tensors ?? {})) {
      const r = ref as TensorRef;
      if (!Array.isArray(r.shape) || r.shape.some((v) => !Number.isInteger(v) || v < 1)) {
        bad(`node ${node.name}: tensor ${tname} has a bad shape`);
      }
      if (!Number.isInteger(r.offset) || r.offset < 0 || r.offset % 4 !== 0) {
        bad(`node ${node.name}: tensor ${tname} has a bad offset`);
      }
    }
    seen.add(node.name);
  });
  return d as unknown as Checkpoint;
}

function validateTensorBounds(ckpt: Checkpoint, byteLength: number): void {
  for (const node of ckpt.nodes) {
    for (const [tname, ref] of Object.entries(node.tensors ?? {})) {
      const count = ref.shape.reduce((a, b) => a * b, 1);
      if (ref.offset + 4 * count > byteLength) {
        bad(`node ${node.name}: tensor ${tname} runs past the weights file`);
      }
    }
  }
}

export function tensorData(loaded: LoadedCheckpoint, ref: TensorRef): Float32Array {
  const count = ref.shape.reduce((a, b) => a * b, 1);
  return loaded.data.subarray(ref.offset / 4, ref.offset / 4 + count);
}

/** Channel count of every node's output, via pass-through inference. */
export function inferChannels(ckpt: Checkpoint): Map<string, number> {
  const channels = new Map<string, number>();
  for (const node of ckpt.nodes) {
    const inChannels = node.inputs.length
      ? node.inputs.map((n) => channels.get(n)!)
      : [ckpt.input.shape[0]];
    let out: number;
    switch (node.op) {
      case "Conv": {
        const w = node.tensors?.weight;
        if (!w || w.shape.length !== 4) {
          throw new ShapeMismatchError(`node ${node.name}: Conv needs a 4-d weight tensor`);
        }
        if (w.shape[1] !== inChannels[0]) {
          throw new ShapeMismatchError(
            `node ${node.name}: weight expects ${w.shape[1]} input channels, gets ${inChannels[0]}`
          );
        }
        out = w.shape[0];
        break;
      }
      case "Concat":
        out = inChannels.reduce((a, b) => a + b, 0);
        break;
      case "BatchNormalization": {
        const scale = node.tensors?.scale;
        if (scale && scale.shape[0] !== inChannels[0]) {
          throw new ShapeMismatchError(
            `node ${node.name}: scale has ${scale.shape[0]} channels, input has ${inChannels[0]}`
          );
        }
        out = inChannels[0];
        break;
      }
      default:
        out = inChannels[0];
    }
    channels.set(node.name, out);
  }
  return channels;
}
