/**
 * Image preprocessing, mirroring the native pipeline exactly: RGB pixels
 * are scaled to [0, 1] *before* resizing, interpolation runs in float64
 * with half-pixel centers, and the result is rounded to float32
 * channels-first. Keeping the arithmetic identical on both sides is what
 * bounds the native/browser probability divergence.
 */

export interface Chw {
  channels: number;
  height: number;
  width: number;
  data: Float32Array;
}

/**
 * RGBA bytes (as from canvas getImageData or a PNG decoder) to a
 * (3, target, target) float32 tensor. Alpha is dropped.
 *
 * Source coordinate for output index i is (i + 0.5) * (in / out) - 0.5,
 * clipped to the valid range; edge pixels clamp.
 */
export function preprocessRgba(
  rgba: Uint8Array | Uint8ClampedArray,
  inWidth: number,
  inHeight: number,
  target: number,
): Chw {
  if (target < 1) {
    throw new Error(`target size must be >= 1, got ${target}`);
  }
  if (rgba.length !== inWidth * inHeight * 4) {
    throw new Error(
      `pixel buffer has ${rgba.length} bytes, expected ${inWidth * inHeight * 4}`,
    );
  }

  const ys = new Float64Array(target);
  const xs = new Float64Array(target);
  for (let i = 0; i < target; i++) {
    ys[i] = clamp((i + 0.5) * (inHeight / target) - 0.5, 0, inHeight - 1);
    xs[i] = clamp((i + 0.5) * (inWidth / target) - 0.5, 0, inWidth - 1);
  }

  const data = new Float32Array(3 * target * target);
  const plane = target * target;
  for (let oy = 0; oy < target; oy++) {
    const sy = ys[oy];
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, inHeight - 1);
    const wy = sy - y0;
    for (let ox = 0; ox < target; ox++) {
      const sx = xs[ox];
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, inWidth - 1);
      const wx = sx - x0;
      const i00 = (y0 * inWidth + x0) * 4;
      const i01 = (y0 * inWidth + x1) * 4;
      const i10 = (y1 * inWidth + x0) * 4;
      const i11 = (y1 * inWidth + x1) * 4;
      for (let c = 0; c < 3; c++) {
        const p00 = rgba[i00 + c] / 255;
        const p01 = rgba[i01 + c] / 255;
        const p10 = rgba[i10 + c] / 255;
        const p11 = rgba[i11 + c] / 255;
        const value =
          p00 * (1 - wy) * (1 - wx) +
          p01 * (1 - wy) * wx +
          p10 * wy * (1 - wx) +
          p11 * wy * wx;
        data[c * plane + oy * target + ox] = value; // fround on store
      }
    }
  }
  return { channels: 3, height: target, width: target, data };
}

function clamp(v: number, lo: number, hi: number): number {
  return v < lo ? lo : v > hi ? hi : v;
}
