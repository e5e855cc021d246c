"""Dense tensors and the numerical kernels of the engine.

All feature maps are 32-bit float, row-major, channels-first: (C, H, W) with
an optional leading batch axis. The dilated convolution is implemented in the
cross-correlation orientation that learned-filter systems use:

    out(o, p) = bias[o] + sum_{c, t} in(c, p + l*t - margin) * k(o, c, t)

with zero fill outside the input bounds and margin = l*(k-1)/2, so spatial
extents are preserved ("same" padding, odd kernels only). Flipping the kernel
on both spatial axes recovers the true-convolution orientation.

Every operation here is a pure function of its arguments; nothing mutates its
inputs, so concurrent callers are safe. The only source of run-to-run
nondeterminism is BLAS threading inside the matrix products; `engine_threads`
pins it. Within one configuration the inner reduction of the convolution is
fixed in (kernel row, kernel column, channel) order — tap-major, which keeps
every unfolding copy contiguous over the channel axis.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits


@contextlib.contextmanager
def engine_threads(threads: int | None = None, deterministic: bool = False):
    """Pin BLAS worker threads for the enclosed computation.

    Deterministic mode forces a single worker so reductions never get
    repartitioned; results are then bit-identical across runs and across any
    requested thread count. With threads=None and deterministic=False the
    ambient BLAS configuration is left alone.
    """
    if deterministic:
        limit = 1
    elif threads is not None:
        if threads < 1:
            raise ValueError(f"thread count must be >= 1, got {threads}")
        limit = threads
    else:
        yield
        return
    with threadpool_limits(limits=limit, user_api="blas"):
        yield


class Tensor:
    """Dense rank-3/4 float32 array: (C, H, W) or (B, C, H, W), row-major."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            raise ValueError(f"tensor data must be float32, got {arr.dtype}")
        if arr.ndim not in (3, 4):
            raise ValueError(f"tensor rank must be 3 or 4, got {arr.ndim}")
        if any(e < 1 for e in arr.shape):
            raise ValueError(f"all extents must be >= 1, got {arr.shape}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        """Build from any array-like, casting to float32."""
        return cls(np.ascontiguousarray(arr, dtype=np.float32))

    @classmethod
    def zeros(cls, dims) -> "Tensor":
        return cls(np.zeros(tuple(dims), dtype=np.float32))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def at(self, *index: int) -> float:
        """Bounds-checked element access; negative indices are rejected."""
        if len(index) != self.data.ndim:
            raise IndexError(f"expected {self.data.ndim} indices, got {len(index)}")
        for i, (ix, extent) in enumerate(zip(index, self.data.shape)):
            if not 0 <= ix < extent:
                raise IndexError(f"index {ix} out of range [0, {extent}) on axis {i}")
        return float(self.data[index])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.dims == other.dims
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


@dataclass(frozen=True)
class ConvParams:
    """Learned parameters of one dilated convolution.

    kernel dims are (out_ch, in_ch, kh, kw) with kh == kw odd; bias is a
    vector of length out_ch or None. Only "same" zero-fill padding exists;
    its margin is dilation * (kernel_size - 1) / 2.
    """

    kernel: Tensor
    bias: np.ndarray | None = None
    dilation: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ValueError(f"kernel must be rank 4, got {self.kernel.data.ndim}")
        out_ch, _, kh, kw = self.kernel.dims
        if kh != kw:
            raise ValueError(f"kernel must be square, got {kh}x{kw}")
        if kh % 2 == 0:
            raise ValueError(f"kernel size must be odd for same padding, got {kh}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding != "same":
            raise ValueError(f'only "same" padding is supported, got {self.padding!r}')
        if self.bias is not None:
            bias = np.asarray(self.bias)
            if bias.shape != (out_ch,):
                raise ValueError(
                    f"bias must have shape ({out_ch},), got {bias.shape}"
                )
            if bias.dtype != np.float32:
                raise ValueError(f"bias must be float32, got {bias.dtype}")

    @property
    def out_channels(self) -> int:
        return self.kernel.dims[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.dims[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.dims[2]

    @property
    def margin(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2


def _as_batched(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    if arr.ndim == 3:
        return arr[np.newaxis], False
    return arr, True


def _im2col(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """Unfold (B, C, H, W) into (B*H*W, k*k*C) sampling columns.

    The reduction axis is ordered kernel row, kernel column, then channel,
    which fixes the accumulation order of the convolution and keeps every
    copy below contiguous over the channel axis.
    """
    b, c, h, w = x.shape
    m = dilation * (k - 1) // 2
    nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    padded = np.pad(nhwc, ((0, 0), (m, m), (m, m), (0, 0)))
    if k == 1:
        return padded.reshape(b * h * w, c)
    cols = np.empty((b, h, w, k, k, c), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = padded[
                :, ky * dilation : ky * dilation + h,
                kx * dilation : kx * dilation + w, :]
    return cols.reshape(b * h * w, k * k * c)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(O, C, k, k) kernel as a (O, k*k*C) matrix matching _im2col's order."""
    o = kernel.shape[0]
    return np.ascontiguousarray(kernel.transpose(0, 2, 3, 1).reshape(o, -1))


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    if x.shape[-3] != params.in_channels:
        raise ValueError(
            f"input has {x.shape[-3]} channels but kernel expects "
            f"{params.in_channels}"
        )


def conv2d_dilated(x: Tensor, params: ConvParams) -> Tensor:
    """Same-padded dilated convolution (cross-correlation orientation).

    Input (C, H, W) or (B, C, H, W) with C == params.in_channels; output has
    the same spatial extents and params.out_channels channels.
    """
    out, _ = conv2d_dilated_cols(x, params)
    return out


def conv2d_dilated_cols(x: Tensor, params: ConvParams) -> tuple[Tensor, np.ndarray]:
    """conv2d_dilated plus the (B*H*W, C*k*k) unfolded input it computed,
    so a training loop can hand the buffer back to the backward pass."""
    arr, batched = _as_batched(x.data)
    _check_conv_input(arr, params)
    b, _, h, w = arr.shape
    k = params.kernel_size
    o = params.out_channels

    col = _im2col(arr, k, params.dilation)
    kmat = _kernel_matrix(params.kernel.data)
    out = col @ kmat.T  # (B*H*W, O): one sgemm, reduction in (ky, kx, c) order
    if params.bias is not None:
        out += params.bias
    out = np.ascontiguousarray(out.reshape(b, h, w, o).transpose(0, 3, 1, 2))
    return Tensor(out if batched else out[0]), col


class ConvGrads(NamedTuple):
    grad_input: Tensor
    grad_kernel: Tensor
    grad_bias: np.ndarray


def conv2d_dilated_backward(
    x: Tensor,
    params: ConvParams,
    grad_out: Tensor,
    _col: np.ndarray | None = None,
) -> ConvGrads:
    """Gradients of <grad_out, conv2d_dilated(x, params)> w.r.t. all inputs.

    grad_bias is returned even for bias-free params (callers just drop it).
    _col lets a training loop reuse the forward pass's unfolded input.
    """
    arr, batched = _as_batched(x.data)
    _check_conv_input(arr, params)
    go, go_batched = _as_batched(grad_out.data)
    if go_batched != batched or go.shape[0] != arr.shape[0]:
        raise ValueError("grad_out batch shape does not match input")
    b, c, h, w = arr.shape
    k = params.kernel_size
    o = params.out_channels
    if go.shape != (b, o, h, w):
        raise ValueError(
            f"grad_out dims {grad_out.dims} do not match forward output "
            f"({o}, {h}, {w})"
        )

    dil = params.dilation
    m = params.margin
    col = _col if _col is not None else _im2col(arr, k, dil)
    go_mat = np.ascontiguousarray(go.transpose(0, 2, 3, 1)).reshape(b * h * w, o)

    grad_bias = go.sum(axis=(0, 2, 3))
    # (col.T @ go).T and go.T @ col are the same product; the former keeps the
    # long axis as the gemm K dimension, which the single-threaded kernel
    # handles measurably faster.
    grad_kernel = np.ascontiguousarray(
        (col.T @ go_mat).T.reshape(o, k, k, c).transpose(0, 3, 1, 2)
    )

    gcol = go_mat @ _kernel_matrix(params.kernel.data)  # (B*H*W, k*k*C)
    gcol = gcol.reshape(b, h, w, k, k, c)
    gpad = np.zeros((b, h + 2 * m, w + 2 * m, c), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            gpad[:, ky * dil : ky * dil + h,
                 kx * dil : kx * dil + w, :] += gcol[:, :, :, ky, kx, :]
    grad_input = np.ascontiguousarray(
        gpad[:, m : m + h, m : m + w, :].transpose(0, 3, 1, 2)
    )
    if not batched:
        grad_input = grad_input[0]
    return ConvGrads(
        Tensor(grad_input),
        Tensor(grad_kernel),
        grad_bias,
    )


class BatchNormResult(NamedTuple):
    output: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    batch_mean: np.ndarray | None
    batch_var: np.ndarray | None


def _check_bn_vectors(channels: int, **vectors: np.ndarray) -> None:
    for name, vec in vectors.items():
        if np.asarray(vec).shape != (channels,):
            raise ValueError(
                f"{name} must have length {channels}, got shape "
                f"{np.asarray(vec).shape}"
            )


def batch_norm(
    x: Tensor,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    mode: str = "infer",
    momentum: float = 0.9,
) -> BatchNormResult:
    """Per-channel normalization y = gamma * (x - mean)/sqrt(var + eps) + beta.

    Infer mode normalizes with the supplied running statistics and passes them
    through unchanged. Train mode normalizes with the batch statistics
    (variance with 1/N) over all non-channel axes and returns
    running <- momentum * running + (1 - momentum) * batch. Inputs are never
    mutated.
    """
    if mode not in ("infer", "train"):
        raise ValueError(f'mode must be "infer" or "train", got {mode!r}')
    # eps = 0 is legal (useful for exact hand-checked normalization); the
    # caller then owns the zero-variance risk.
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    arr, batched = _as_batched(x.data)
    c = arr.shape[1]
    _check_bn_vectors(c, gamma=gamma, beta=beta,
                      running_mean=running_mean, running_var=running_var)
    shape = (1, c, 1, 1)
    if mode == "infer":
        mean = np.asarray(running_mean, dtype=np.float32)
        var = np.asarray(running_var, dtype=np.float32)
        batch_mean = batch_var = None
        new_mean, new_var = running_mean, running_var
    else:
        batch_mean = arr.mean(axis=(0, 2, 3), dtype=np.float32)
        batch_var = arr.var(axis=(0, 2, 3), dtype=np.float32)
        mean, var = batch_mean, batch_var
        mom = np.float32(momentum)
        new_mean = mom * np.asarray(running_mean) + (np.float32(1) - mom) * batch_mean
        new_var = mom * np.asarray(running_var) + (np.float32(1) - mom) * batch_var
    inv = np.float32(1) / np.sqrt(var + np.float32(eps))
    y = (arr - mean.reshape(shape)) * (np.asarray(gamma) * inv).reshape(shape)
    y += np.asarray(beta).reshape(shape)
    y = y.astype(np.float32, copy=False)
    return BatchNormResult(
        Tensor(y if batched else y[0]), new_mean, new_var, batch_mean, batch_var
    )


class BatchNormGrads(NamedTuple):
    grad_input: Tensor
    grad_gamma: np.ndarray
    grad_beta: np.ndarray


def batch_norm_backward(
    x: Tensor,
    gamma: np.ndarray,
    grad_out: Tensor,
    eps: float = 1e-5,
) -> BatchNormGrads:
    """Backward pass of train-mode batch_norm (batch statistics path)."""
    arr, batched = _as_batched(x.data)
    go, _ = _as_batched(grad_out.data)
    if go.shape != arr.shape:
        raise ValueError(f"grad_out dims {go.shape} do not match input {arr.shape}")
    c = arr.shape[1]
    _check_bn_vectors(c, gamma=gamma)
    n = arr.shape[0] * arr.shape[2] * arr.shape[3]
    shape = (1, c, 1, 1)

    mean = arr.mean(axis=(0, 2, 3), dtype=np.float32)
    var = arr.var(axis=(0, 2, 3), dtype=np.float32)
    inv = np.float32(1) / np.sqrt(var + np.float32(eps))
    xhat = (arr - mean.reshape(shape)) * inv.reshape(shape)

    grad_beta = go.sum(axis=(0, 2, 3))
    grad_gamma = (go * xhat).sum(axis=(0, 2, 3))

    # dL/dx through the batch statistics:
    #   dx = inv/N * gamma * (N*dy - sum(dy) - xhat * sum(dy*xhat))
    gsum = grad_beta.reshape(shape)
    gx_sum = grad_gamma.reshape(shape)
    gi = (np.asarray(gamma).reshape(shape) * inv.reshape(shape) / np.float32(n)) * (
        np.float32(n) * go - gsum - xhat * gx_sum
    )
    gi = gi.astype(np.float32, copy=False)
    return BatchNormGrads(
        Tensor(gi if batched else gi[0]), grad_gamma, grad_beta
    )


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, np.float32(0)))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if grad_out.dims != x.dims:
        raise ValueError(f"grad_out dims {grad_out.dims} do not match {x.dims}")
    return Tensor(grad_out.data * (x.data > 0))


def global_avg_pool(x: Tensor) -> np.ndarray:
    """Mean over each channel's spatial plane: (C, H, W) -> (C,), batched
    (B, C, H, W) -> (B, C)."""
    return x.data.mean(axis=(-2, -1), dtype=np.float32)


def global_avg_pool_backward(x_dims: tuple[int, ...], grad_out: np.ndarray) -> Tensor:
    """Spread per-channel gradients uniformly back over the spatial plane."""
    h, w = x_dims[-2], x_dims[-1]
    g = np.asarray(grad_out, dtype=np.float32) / np.float32(h * w)
    out = np.broadcast_to(g[..., np.newaxis, np.newaxis], tuple(x_dims))
    return Tensor(np.ascontiguousarray(out.astype(np.float32, copy=False)))


def softmax(v: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax over the last axis; rejects empty input."""
    arr = np.asarray(v, dtype=np.float32)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ValueError("softmax input must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax input must be finite")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


_PROB_FLOOR = np.float32(1e-12)


def categorical_cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """-sum(target * log(pred)) with probabilities floored at 1e-12."""
    p = np.asarray(pred, dtype=np.float32)
    t = np.asarray(target, dtype=np.float32)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} does not match target {t.shape}")
    if abs(float(p.sum(axis=-1).max()) - 1.0) > 1e-6 or \
            abs(float(p.sum(axis=-1).min()) - 1.0) > 1e-6:
        raise ValueError("pred rows must sum to 1 within 1e-6")
    losses = -(t * np.log(np.maximum(p, _PROB_FLOOR))).sum(axis=-1)
    return float(losses if losses.ndim == 0 else losses.mean())


def cross_entropy_logit_grad(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of softmax + cross-entropy w.r.t. the logits: probs - target."""
    p = np.asarray(probs, dtype=np.float32)
    t = np.asarray(target, dtype=np.float32)
    if p.shape != t.shape:
        raise ValueError(f"probs shape {p.shape} does not match target {t.shape}")
    return p - t
