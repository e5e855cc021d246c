"""Independent float64 reference implementations used as test oracles.

Everything here is written

  * in 64-bit floats,
  * with direct per-output-element summation (no im2col, no matrix products),
  * from the operation definitions alone,

so agreement with the engine is evidence, not circularity. These functions are
deliberately slow; keep the shapes they are fed small.
"""

from __future__ import annotations

import numpy as np


def conv2d_direct(x: np.ndarray, kernel: np.ndarray,
                  bias: np.ndarray | None, dilation: int) -> np.ndarray:
    """Direct-summation dilated cross-correlation, zero-fill same padding.

    out(o, y, x) = bias[o] + sum_{c,ty,tx} in(c, y + l*ty - m, x + l*tx - m)
                                           * kernel(o, c, ty, tx)
    with m = l*(k-1)/2 and zero outside the input bounds. Accepts (C, H, W)
    input and (O, C, k, k) kernel; returns (O, H, W) float64.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    o_ch, c_ch, k, k2 = kernel.shape
    assert k == k2 and k % 2 == 1
    c, h, w = x.shape
    assert c == c_ch
    m = dilation * (k - 1) // 2
    padded = np.zeros((c, h + 2 * m, w + 2 * m), dtype=np.float64)
    padded[:, m:m + h, m:m + w] = x
    out = np.zeros((o_ch, h, w), dtype=np.float64)
    for y in range(h):
        for xx in range(w):
            # The gathered window is the set of taps {y + l*ty, x + l*tx}
            # shifted into padded coordinates.
            window = padded[:,
                            y:y + dilation * (k - 1) + 1:dilation,
                            xx:xx + dilation * (k - 1) + 1:dilation]
            out[:, y, xx] = np.tensordot(kernel, window, axes=3)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(o_ch, 1, 1)
    return out


def conv2d_direct_batched(x: np.ndarray, kernel: np.ndarray,
                          bias: np.ndarray | None,
                          dilation: int) -> np.ndarray:
    """conv2d_direct over a leading batch axis."""
    return np.stack([conv2d_direct(img, kernel, bias, dilation) for img in x])


def batch_norm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float) -> np.ndarray:
    """Train-mode batch normalization: batch statistics (1/N variance) over
    all non-channel axes of a (B, C, H, W) array."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    shape = (1, -1, 1, 1)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return (np.asarray(gamma, dtype=np.float64).reshape(shape) * xhat
            + np.asarray(beta, dtype=np.float64).reshape(shape))


def batch_norm_infer(x: np.ndarray, gamma, beta, mean, var,
                     eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (-1, 1, 1)
    g = np.asarray(gamma, dtype=np.float64).reshape(shape)
    b = np.asarray(beta, dtype=np.float64).reshape(shape)
    m = np.asarray(mean, dtype=np.float64).reshape(shape)
    v = np.asarray(var, dtype=np.float64).reshape(shape)
    return g * (x - m) / np.sqrt(v + eps) + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of (C, H, W) or (B, C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    axes = (1, 2) if x.ndim == 3 else (2, 3)
    return x.mean(axis=axes)

def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.maximum(np.asarray(pred, dtype=np.float64), 1e-12)
    return float(-(np.asarray(target, dtype=np.float64)
                   * np.log(pred)).sum(axis=-1).mean())


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-output-pixel bilinear interpolation with half-pixel-center source
    coordinates, clipped to the source extent; (H, W, C) float64 in and out.

    Written with explicit scalar loops so it shares no code shape with the
    engine's vectorized version.
    """
    image = np.asarray(image, dtype=np.float64)
    src_h, src_w = image.shape[:2]
    out = np.zeros((out_h, out_w) + image.shape[2:], dtype=np.float64)
    for y in range(out_h):
        sy = (y + 0.5) * (src_h / out_h) - 0.5
        sy = min(max(sy, 0.0), src_h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, src_h - 1)
        wy = sy - y0
        for x in range(out_w):
            sx = (x + 0.5) * (src_w / out_w) - 0.5
            sx = min(max(sx, 0.0), src_w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, src_w - 1)
            wx = sx - x0
            out[y, x] = (image[y0, x0] * (1 - wy) * (1 - wx)
                         + image[y0, x1] * (1 - wy) * wx
                         + image[y1, x0] * wy * (1 - wx)
                         + image[y1, x1] * wy * wx)
    return out


def central_difference(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """64-bit central finite differences of scalar-valued f at x, elementwise:
    df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        up = f(x)
        xf[i] = orig - step
        down = f(x)
        xf[i] = orig
        flat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Norm-wise relative error max|a - r| / max(1e-12, max|r|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(1e-12, float(np.abs(reference).max(initial=0.0)))
    return float(np.abs(analytic - reference).max(initial=0.0)) / denom
