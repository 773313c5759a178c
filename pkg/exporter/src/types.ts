/** Interchange checkpoint: a JSON graph plus one raw little-endian f32 file. */

export interface TensorRef {
  /** logical shape, row-major */
  shape: number[];
  /** byte offset into the weights file */
  offset: number;
}

export interface CheckpointNode {
  name: string;
  op: string;
  /** names of producer nodes; empty only for the entry node */
  inputs: string[];
  attrs?: Record<string, unknown>;
  tensors?: Record<string, TensorRef>;
}

export interface Checkpoint {
  format: string;
  name: string;
  input: { shape: [number, number, number] };
  /** weights file path, relative to the checkpoint JSON */
  weights: string;
  nodes: CheckpointNode[];
}

export interface LoadedCheckpoint {
  doc: Checkpoint;
  /** full weights buffer as float32 */
  data: Float32Array;
  /** resolved absolute path of the weights file */
  weightsPath: string;
}

/** Operators the exporter knows how to map onto the toolkit's layer kinds. */
export const DEFAULT_ALLOWLIST = [
  "Conv",
  "BatchNormalization",
  "Relu",
  "LeakyRelu",
  "Silu",
  "Relu6",
  "Concat",
  "MaxPool",
  "Upsample",
  "Output",
] as const;

export class CheckpointParseError extends Error {}

export class ShapeMismatchError extends Error {}

export class UnsupportedOperatorError extends Error {
  readonly offenders: { node: string; op: string }[];

  constructor(offenders: { node: string; op: string }[]) {
    const list = offenders.map((o) => `${o.node} (op ${o.op})`).join(", ");
    super(`unsupported operator(s): ${list}`);
    this.offenders = offenders;
  }
}
