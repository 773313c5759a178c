/** Programmatic checkpoint construction for the tests. */

import * as fs from "fs";
import * as path from "path";

import { CheckpointNode } from "../src/types";

/** mulberry32: tiny deterministic PRNG, good enough for test weights */
export function rng(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function randomData(count: number, rand: () => number, scale = 1): Float32Array {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) out[i] = (rand() * 2 - 1) * scale;
  return out;
}

export class CheckpointBuilder {
  readonly nodes: CheckpointNode[] = [];
  private chunks: Float32Array[] = [];
  private offset = 0;

  constructor(
    readonly name: string,
    readonly inputShape: [number, number, number],
    private rand: () => number = rng(1234)
  ) {}

  tensor(data: Float32Array, shape: number[]): { shape: number[]; offset: number } {
    const ref = { shape, offset: this.offset };
    this.chunks.push(data);
    this.offset += data.byteLength;
    return ref;
  }

  node(n: CheckpointNode): string {
    this.nodes.push(n);
    return n.name;
  }

  conv(
    name: string,
    inputs: string[],
    outC: number,
    inC: number,
    k = 1,
    opts: { stride?: number; padding?: number; bias?: boolean; scale?: number } = {}
  ): string {
    const w = randomData(outC * inC * k * k, this.rand, (opts.scale ?? 1) / Math.sqrt(inC * k * k));
    const tensors: Record<string, { shape: number[]; offset: number }> = {
      weight: this.tensor(w, [outC, inC, k, k]),
    };
    if (opts.bias) {
      tensors.bias = this.tensor(randomData(outC, this.rand, 0.05), [outC]);
    }
    return this.node({
      name,
      op: "Conv",
      inputs,
      attrs: { stride: opts.stride ?? 1, padding: opts.padding ?? Math.floor(k / 2) },
      tensors,
    });
  }

  batchNorm(name: string, input: string, channels: number): string {
    const positive = (count: number) => {
      const d = new Float32Array(count);
      for (let i = 0; i < count; i++) d[i] = 0.5 + this.rand();
      return d;
    };
    return this.node({
      name,
      op: "BatchNormalization",
      inputs: [input],
      attrs: { epsilon: 1e-5 },
      tensors: {
        scale: this.tensor(positive(channels), [channels]),
        bias: this.tensor(randomData(channels, this.rand, 0.1), [channels]),
        mean: this.tensor(randomData(channels, this.rand, 0.1), [channels]),
        variance: this.tensor(positive(channels), [channels]),
      },
    });
  }

  write(dir: string): string {
    fs.mkdirSync(dir, { recursive: true });
    const jsonPath = path.join(dir, `${this.name}.ckpt.json`);
    const binPath = path.join(dir, `${this.name}.weights.bin`);
    const doc = {
      format: "cnn-checkpoint",
      name: this.name,
      input: { shape: this.inputShape },
      weights: path.basename(binPath),
      nodes: this.nodes,
    };
    fs.writeFileSync(jsonPath, JSON.stringify(doc, null, 2));
    const total = this.chunks.reduce((a, c) => a + c.byteLength, 0);
    const buf = Buffer.alloc(total);
    let at = 0;
    for (const c of this.chunks) {
      Buffer.from(c.buffer, c.byteOffset, c.byteLength).copy(buf, at);
      at += c.byteLength;
    }
    fs.writeFileSync(binPath, buf);
    return jsonPath;
  }
}

/** conv -> relu -> conv -> Output */
export function tinyChain(dir: string, seed = 7): string {
  const b = new CheckpointBuilder("tiny-chain", [3, 8, 8], rng(seed));
  const c1 = b.conv("c1", [], 8, 3, 3, { bias: true });
  const r1 = b.node({ name: "r1", op: "Relu", inputs: [c1] });
  const c2 = b.conv("c2", [r1], 4, 8, 1, { bias: true });
  b.node({ name: "out", op: "Output", inputs: [c2] });
  return b.write(dir);
}

/** branches + BN + Concat + MaxPool + Upsample, every supported operator */
export function concatNet(dir: string, seed = 11): string {
  const b = new CheckpointBuilder("concat-net", [3, 8, 8], rng(seed));
  const stem = b.conv("stem", [], 6, 3, 3);
  const bn = b.batchNorm("stem_bn", stem, 6);
  const act = b.node({ name: "stem_act", op: "Silu", inputs: [bn] });
  const left = b.conv("left", [act], 5, 6, 1, { bias: true });
  const lrelu = b.node({ name: "left_act", op: "LeakyRelu", inputs: [left], attrs: { alpha: 0.1 } });
  const right = b.conv("right", [act], 4, 6, 3);
  const r6 = b.node({ name: "right_act", op: "Relu6", inputs: [right] });
  const cat = b.node({ name: "cat", op: "Concat", inputs: [lrelu, r6], attrs: { axis: 1 } });
  const mp = b.node({ name: "mp", op: "MaxPool", inputs: [cat], attrs: { kernel: 2, stride: 2 } });
  const mid = b.conv("mid", [mp], 6, 9, 1, { bias: true });
  const up = b.node({ name: "up", op: "Upsample", inputs: [mid], attrs: { scale: 2, mode: "nearest" } });
  const head = b.conv("head", [up], 4, 6, 1, { bias: true });
  b.node({ name: "out", op: "Output", inputs: [head] });
  return b.write(dir);
}

/** contains an element-wise add, which the toolkit rejects */
export function netWithAdd(dir: string): string {
  const b = new CheckpointBuilder("with-add", [3, 8, 8], rng(3));
  const c1 = b.conv("c1", [], 4, 3, 1);
  const c2 = b.conv("c2", [c1], 4, 4, 1);
  b.node({ name: "residual_sum", op: "Add", inputs: [c1, c2] });
  return b.write(dir);
}
