/** Reference forward pass over a source checkpoint (the "source runtime").
 *
 * Used to check that an exported model behaves identically when evaluated by
 * the pruning toolkit. Math in float64; clarity over speed.
 */

import { tensorData } from "./checkpoint";
import { CheckpointNode, LoadedCheckpoint, ShapeMismatchError } from "./types";

export interface Activation {
  shape: [number, number, number]; // channels, height, width
  data: Float64Array;
}

function conv2d(
  x: Activation,
  w: Float64Array,
  wShape: number[],
  bias: Float64Array | null,
  stride: number,
  pad: number
): Activation {
  const [cIn, h, ww] = x.shape;
  const [cOut, , kh, kw] = wShape;
  const oh = Math.floor((h + 2 * pad - kh) / stride) + 1;
  const ow = Math.floor((ww + 2 * pad - kw) / stride) + 1;
  const out = new Float64Array(cOut * oh * ow);
  for (let oc = 0; oc < cOut; oc++) {
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let acc = bias ? bias[oc] : 0;
        for (let ic = 0; ic < cIn; ic++) {
          for (let ky = 0; ky < kh; ky++) {
            const iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (let kx = 0; kx < kw; kx++) {
              const ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= ww) continue;
              acc += w[((oc * cIn + ic) * kh + ky) * kw + kx] * x.data[(ic * h + iy) * ww + ix];
            }
          }
        }
        out[(oc * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return { shape: [cOut, oh, ow], data: out };
}

function maxpool(x: Activation, kernel: number, stride: number, pad: number): Activation {
  const [c, h, w] = x.shape;
  const oh = Math.floor((h + 2 * pad - kernel) / stride) + 1;
  const ow = Math.floor((w + 2 * pad - kernel) / stride) + 1;
  const out = new Float64Array(c * oh * ow);
  for (let ci = 0; ci < c; ci++) {
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let best = -Infinity;
        for (let ky = 0; ky < kernel; ky++) {
          const iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (let kx = 0; kx < kernel; kx++) {
            const ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            const v = x.data[(ci * h + iy) * w + ix];
            if (v > best) best = v;
          }
        }
        out[(ci * oh + oy) * ow + ox] = best;
      }
    }
  }
  return { shape: [c, oh, ow], data: out };
}

function activationFn(x: Activation, op: string): Activation {
  const out = new Float64Array(x.data.length);
  for (let i = 0; i < x.data.length; i++) {
    const v = x.data[i];
    if (op === "Relu") out[i] = v > 0 ? v : 0;
    else if (op === "LeakyRelu") out[i] = v > 0 ? v : 0.1 * v;
    else if (op === "Silu") out[i] = v / (1 + Math.exp(-v));
    else out[i] = Math.min(Math.max(v, 0), 6); // Relu6
  }
  return { shape: x.shape, data: out };
}

function num(node: CheckpointNode, key: string, fallback: number): number {
  const v = node.attrs?.[key];
  return typeof v === "number" ? v : fallback;
}

export function forwardCheckpoint(
  loaded: LoadedCheckpoint,
  input: Float32Array | Float64Array
): Map<string, Activation> {
  const [c, h, w] = loaded.doc.input.shape;
  if (input.length !== c * h * w) {
    throw new ShapeMismatchError(`input has ${input.length} values, expected ${c * h * w}`);
  }
  const acts = new Map<string, Activation>();
  const x0: Activation = { shape: [c, h, w], data: Float64Array.from(input) };

  for (const node of loaded.doc.nodes) {
    const srcs = node.inputs.length ? node.inputs.map((n) => acts.get(n)!) : [x0];
    let out: Activation;
    switch (node.op) {
      case "Conv": {
        const wref = node.tensors!.weight;
        const weights = Float64Array.from(tensorData(loaded, wref));
        const bias = node.tensors!.bias
          ? Float64Array.from(tensorData(loaded, node.tensors!.bias))
          : null;
        out = conv2d(srcs[0], weights, wref.shape, bias, num(node, "stride", 1), num(node, "padding", 0));
        break;
      }
      case "BatchNormalization": {
        const eps = num(node, "epsilon", 1e-5);
        const scale = tensorData(loaded, node.tensors!.scale);
        const bias = tensorData(loaded, node.tensors!.bias);
        const mean = tensorData(loaded, node.tensors!.mean);
        const variance = tensorData(loaded, node.tensors!.variance);
        const [cc, hh, www] = srcs[0].shape;
        const data = new Float64Array(srcs[0].data.length);
        for (let ci = 0; ci < cc; ci++) {
          const s = scale[ci] / Math.sqrt(variance[ci] + eps);
          for (let i = 0; i < hh * www; i++) {
            data[ci * hh * www + i] = (srcs[0].data[ci * hh * www + i] - mean[ci]) * s + bias[ci];
          }
        }
        out = { shape: srcs[0].shape, data };
        break;
      }
      case "Relu":
      case "LeakyRelu":
      case "Silu":
      case "Relu6":
        out = activationFn(srcs[0], node.op);
        break;
      case "Concat": {
        const [, hh, www] = srcs[0].shape;
        const total = srcs.reduce((a, s) => a + s.shape[0], 0);
        const data = new Float64Array(total * hh * www);
        let at = 0;
        for (const s of srcs) {
          if (s.shape[1] !== hh || s.shape[2] !== www) {
            throw new ShapeMismatchError(`node ${node.name}: concat spatial mismatch`);
          }
          data.set(s.data, at);
          at += s.data.length;
        }
        out = { shape: [total, hh, www], data };
        break;
      }
      case "MaxPool":
        out = maxpool(srcs[0], num(node, "kernel", 2), num(node, "stride", 1), num(node, "padding", 0));
        break;
      case "Upsample": {
        const scale = num(node, "scale", 2);
        const [cc, hh, www] = srcs[0].shape;
        const data = new Float64Array(cc * hh * scale * www * scale);
        for (let ci = 0; ci < cc; ci++) {
          for (let oy = 0; oy < hh * scale; oy++) {
            for (let ox = 0; ox < www * scale; ox++) {
              data[(ci * hh * scale + oy) * www * scale + ox] =
                srcs[0].data[(ci * hh + Math.floor(oy / scale)) * www + Math.floor(ox / scale)];
            }
          }
        }
        out = { shape: [cc, hh * scale, www * scale], data };
        break;
      }
      case "Output":
        out = srcs[0];
        break;
      default:
        throw new ShapeMismatchError(`node ${node.name}: cannot evaluate op ${node.op}`);
    }
    acts.set(node.name, out);
  }
  return acts;
}

/** Activations of the Output-marked nodes, in declaration order. */
export function outputActivations(loaded: LoadedCheckpoint, input: Float32Array): Activation[] {
  const acts = forwardCheckpoint(loaded, input);
  return loaded.doc.nodes.filter((n) => n.op === "Output").map((n) => acts.get(n.name)!);
}
