/**
 * Forward-only inference for MELD weight bundles.
 *
 * The math mirrors the native engine layer for layer: dilated 3x3 (and 1x1)
 * convolutions in cross-correlation orientation with zero-filled same
 * padding, inference-mode batchnorm, ReLU, global average pooling, softmax.
 * Accumulation runs in float64 and every activation is stored as float32,
 * so the two implementations agree to well under 1e-4 per class.
 *
 * The convolution lowers each layer to a (taps x pixels) matrix and sweeps
 * it once per block of four output channels — contiguous inner loops, no
 * per-pixel bounds checks after the fill.
 */

import type { ArchConfig, WeightBundle } from "./meld.js";
import type { Chw } from "./preprocess.js";

export interface Classification {
  label: "benign" | "malignant";
  pBenign: number;
  pMalignant: number;
  logits: [number, number];
}

export class Engine {
  constructor(readonly bundle: WeightBundle) {}

  get config(): ArchConfig {
    return this.bundle.config;
  }

  get inputSize(): number {
    return this.bundle.config.input.height;
  }

  classify(image: Chw): Classification {
    const { config, tensors } = this.bundle;
    if (image.channels !== config.input.channels) {
      throw new Error(
        `image has ${image.channels} channels, model expects ${config.input.channels}`,
      );
    }
    let x = image;
    let logits: Float32Array | null = null;
    let probs: Float64Array | null = null;

    config.layers.forEach((layer, i) => {
      const prefix = `layer${String(i).padStart(2, "0")}`;
      switch (layer.kind) {
        case "conv": {
          const kernel = tensors.get(`${prefix}.kernel`)!;
          const bias = layer.bias !== false ? tensors.get(`${prefix}.bias`)!.data : null;
          x = conv2dDilated(x, kernel.shape, kernel.data, bias, layer.dilation ?? 1);
          break;
        }
        case "batchnorm": {
          const gamma = tensors.get(`${prefix}.gamma`)!.data;
          const beta = tensors.get(`${prefix}.beta`)!.data;
          const mean = tensors.get(`${prefix}.running_mean`)!.data;
          const variance = tensors.get(`${prefix}.running_var`)!.data;
          batchNormInfer(x, gamma, beta, mean, variance);
          break;
        }
        case "relu": {
          const d = x.data;
          for (let j = 0; j < d.length; j++) if (d[j] < 0) d[j] = 0;
          break;
        }
        case "global_avg_pool": {
          logits = globalAvgPool(x);
          break;
        }
        case "softmax": {
          if (logits === null) {
            throw new Error("softmax before global_avg_pool in layer stack");
          }
          probs = softmax(logits);
          break;
        }
      }
    });

    if (logits === null || probs === null) {
      throw new Error("layer stack produced no prediction");
    }
    const resolvedLogits = logits as Float32Array;
    const resolvedProbs = probs as Float64Array;
    const pBenign = resolvedProbs[0];
    const pMalignant = resolvedProbs[1];
    return {
      label: pMalignant > pBenign ? "malignant" : "benign",
      pBenign,
      pMalignant,
      logits: [resolvedLogits[0], resolvedLogits[1]],
    };
  }
}

const EPS = Math.fround(1e-5);

function conv2dDilated(
  x: Chw,
  kernelShape: number[],
  kernel: Float32Array,
  bias: Float32Array | null,
  dilation: number,
): Chw {
  const [outCh, inCh, k] = kernelShape;
  const { height: h, width: w, data: src } = x;
  const margin = (dilation * (k - 1)) / 2;
  const hw = h * w;
  const taps = k * k * inCh;

  // cols[t * hw + p] = input value under kernel tap t at output pixel p,
  // taps ordered (ky, kx, c); zero where the tap hangs over the edge.
  const cols = new Float32Array(taps * hw);
  let tap = 0;
  for (let ky = 0; ky < k; ky++) {
    const dy = dilation * ky - margin;
    for (let kx = 0; kx < k; kx++) {
      const dx = dilation * kx - margin;
      for (let c = 0; c < inCh; c++, tap++) {
        const colBase = tap * hw;
        const srcBase = c * hw;
        const y0 = Math.max(0, -dy);
        const y1 = Math.min(h, h - dy);
        for (let y = y0; y < y1; y++) {
          const sy = y + dy;
          const x0 = Math.max(0, -dx);
          const x1 = Math.min(w, w - dx);
          const colRow = colBase + y * w;
          const srcRow = srcBase + sy * w + dx;
          for (let xx = x0; xx < x1; xx++) {
            cols[colRow + xx] = src[srcRow + xx];
          }
        }
      }
    }
  }

  // out[o] = bias[o] + sum_t kernel[o, t] * cols[t]; four output channels
  // share each sweep of a cols row to quarter the memory traffic.
  const out = new Float32Array(outCh * hw);
  const acc = [
    new Float64Array(hw),
    new Float64Array(hw),
    new Float64Array(hw),
    new Float64Array(hw),
  ];
  for (let o0 = 0; o0 < outCh; o0 += 4) {
    const block = Math.min(4, outCh - o0);
    for (let b = 0; b < block; b++) {
      acc[b].fill(bias ? bias[o0 + b] : 0);
    }
    for (let t = 0; t < taps; t++) {
      const colBase = t * hw;
      // kernel is (out, in, ky, kx); taps iterate (ky, kx, c)
      const ky = Math.floor(t / (k * inCh));
      const kx = Math.floor(t / inCh) % k;
      const c = t % inCh;
      const kIndexBase = (c * k + ky) * k + kx;
      for (let b = 0; b < block; b++) {
        const wgt = kernel[(o0 + b) * inCh * k * k + kIndexBase];
        if (wgt === 0) continue;
        const a = acc[b];
        for (let p = 0; p < hw; p++) {
          a[p] += wgt * cols[colBase + p];
        }
      }
    }
    for (let b = 0; b < block; b++) {
      const a = acc[b];
      const outBase = (o0 + b) * hw;
      for (let p = 0; p < hw; p++) {
        out[outBase + p] = a[p]; // fround on store
      }
    }
  }
  return { channels: outCh, height: h, width: w, data: out };
}

function batchNormInfer(
  x: Chw,
  gamma: Float32Array,
  beta: Float32Array,
  mean: Float32Array,
  variance: Float32Array,
): void {
  const { channels, height, width, data } = x;
  const hw = height * width;
  for (let c = 0; c < channels; c++) {
    const scale = gamma[c] / Math.sqrt(variance[c] + EPS);
    const shift = beta[c] - mean[c] * scale;
    const base = c * hw;
    for (let p = 0; p < hw; p++) {
      data[base + p] = Math.fround(data[base + p] * scale + shift);
    }
  }
}

function globalAvgPool(x: Chw): Float32Array {
  const { channels, height, width, data } = x;
  const hw = height * width;
  const out = new Float32Array(channels);
  for (let c = 0; c < channels; c++) {
    let sum = 0;
    const base = c * hw;
    for (let p = 0; p < hw; p++) sum += data[base + p];
    out[c] = sum / hw;
  }
  return out;
}

function softmax(logits: Float32Array): Float64Array {
  let max = -Infinity;
  for (const v of logits) {
    if (!Number.isFinite(v)) throw new Error("softmax input must be finite");
    if (v > max) max = v;
  }
  const exps = new Float64Array(logits.length);
  let total = 0;
  for (let i = 0; i < logits.length; i++) {
    exps[i] = Math.exp(logits[i] - max);
    total += exps[i];
  }
  for (let i = 0; i < exps.length; i++) exps[i] /= total;
  return exps;
}
