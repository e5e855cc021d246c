"""Desk-scale training: augmentation, 50:50 balancing, Adam, synthetic data.

Randomness discipline — every random choice derives from TrainConfig.seed
through np.random.SeedSequence((seed, tag, ...)) with a fixed tag per
purpose:

    0  weight initialization (model engine)
    1  class balancing (which minority records the remainder duplicates)
    2  per-epoch shuffling, keyed (seed, 2, epoch)
    3  per-record augmentation, keyed (seed, 3, crc32(source|path), augment_seed)

Augmentation is applied to oversampled duplicates (augment_seed > 0): the
original of each record trains unmodified, and every duplicate gets its own
deterministic variant. Keying by record identity instead of position makes
the result independent of shuffling order, so preprocessed tensors are
computed once and reused across epochs.

With deterministic=True (the default) the engine's BLAS is pinned to one
thread for the whole run, making weights and history bit-identical across
runs and requested thread counts on the same build.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image

from . import tensor_core as tc
from .data import (
    DatasetManifest,
    SampleRecord,
    bilinear_resize,
    preprocess,
    save_manifest,
)
from .errors import DataError
from .model import ArchitectureConfig, WeightBundle, init_weights
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

_TAG_BALANCE = 1
_TAG_SHUFFLE = 2
_TAG_AUGMENT = 3
_TAG_SYNTH = 4


def _generator(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def balance_rng(seed: int) -> np.random.Generator:
    """The generator train() hands to balance_50_50 for this seed."""
    return _generator(seed, _TAG_BALANCE)


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges and per-transform apply probabilities.

    Transforms run in a fixed order — rotation, zoom, crop + resize back,
    horizontal flip, vertical flip — and every decision and parameter is
    drawn from the RNG in that order whether or not the transform fires, so
    the random stream does not depend on earlier outcomes.
    """

    rotation_probability: float = 0.5
    rotation_degrees: float = 30.0
    zoom_probability: float = 0.5
    zoom_range: tuple[float, float] = (0.8, 1.25)
    crop_probability: float = 0.5
    crop_fraction: float = 0.9
    flip_probability: float = 0.5

    def __post_init__(self):
        for name in ("rotation_probability", "zoom_probability",
                     "crop_probability", "flip_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be >= 0")
        lo, hi = self.zoom_range
        if not (0 < lo <= hi):
            raise ValueError(f"zoom_range must be 0 < lo <= hi, got {self.zoom_range}")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError(
                f"crop_fraction must be in (0, 1], got {self.crop_fraction}"
            )

    @classmethod
    def none(cls) -> "AugmentConfig":
        """All probabilities zero: augment() becomes the identity."""
        return cls(rotation_probability=0.0, zoom_probability=0.0,
                   crop_probability=0.0, flip_probability=0.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    image_size: int = 150
    deterministic: bool = True
    threads: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2 must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must fit in u64")
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
        t=0,
    )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh arrays, inputs untouched."""
    if set(params) != set(grads):
        raise ValueError(
            f"params/grads key mismatch: {sorted(set(params) ^ set(grads))}"
        )
    t = state.t + 1
    b1 = np.float32(cfg.beta1)
    b2 = np.float32(cfg.beta2)
    lr = np.float32(cfg.learning_rate)
    eps = np.float32(cfg.eps)
    corr1 = np.float32(1.0 - cfg.beta1 ** t)
    corr2 = np.float32(1.0 - cfg.beta2 ** t)
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient for {name} has shape {g.shape}, parameter {p.shape}"
            )
        m = b1 * state.m[name] + (np.float32(1) - b1) * g
        v = b2 * state.v[name] + (np.float32(1) - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(
            np.float32, copy=False
        )
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


# --- geometric transforms ---------------------------------------------------

def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold integer indices into [0, n-1] by symmetric reflection
    (…1, 0 | 0, 1, …, n-1 | n-1, n-2…)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    folded = np.mod(idx, period)
    return np.where(folded >= n, period - 1 - folded, folded)


def _sample_reflect(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Bilinear sample of (C, H, W) float64 img at float coords, reflect fill."""
    _, h, w = img.shape
    y0f = np.floor(sy)
    x0f = np.floor(sx)
    wy = sy - y0f
    wx = sx - x0f
    y0 = _reflect_index(y0f.astype(np.intp), h)
    y1 = _reflect_index(y0f.astype(np.intp) + 1, h)
    x0 = _reflect_index(x0f.astype(np.intp), w)
    x1 = _reflect_index(x0f.astype(np.intp) + 1, w)
    p00 = img[:, y0, x0]
    p01 = img[:, y0, x1]
    p10 = img[:, y1, x0]
    p11 = img[:, y1, x1]
    return (p00 * (1.0 - wy) * (1.0 - wx)
            + p01 * (1.0 - wy) * wx
            + p10 * wy * (1.0 - wx)
            + p11 * wy * wx)


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate (C, H, W) float64 img about its center, reflect fill."""
    _, h, w = img.shape
    rad = np.deg2rad(angle_deg)
    cos, sin = np.cos(rad), np.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    sy = -sin * dx + cos * dy + cy
    sx = cos * dx + sin * dy + cx
    return _sample_reflect(img, sy, sx)


def _zoom(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the center: factor > 1 magnifies, < 1 shrinks with
    reflect fill."""
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sy = (np.arange(h, dtype=np.float64) - cy) / factor + cy
    sx = (np.arange(w, dtype=np.float64) - cx) / factor + cx
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    return _sample_reflect(img, yy, xx)


def _crop_resize(img: np.ndarray, fraction: float,
                 u_top: float, u_left: float) -> np.ndarray:
    """Crop a fraction-sized window at a position chosen by (u_top, u_left)
    in [0, 1), then resize back to the original extent."""
    _, h, w = img.shape
    crop_h = max(1, round(h * fraction))
    crop_w = max(1, round(w * fraction))
    if crop_h >= h and crop_w >= w:
        return img
    top = min(int(u_top * (h - crop_h + 1)), h - crop_h)
    left = min(int(u_left * (w - crop_w + 1)), w - crop_w)
    window = img[:, top:top + crop_h, left:left + crop_w]
    return bilinear_resize(window.transpose(1, 2, 0), h, w).transpose(2, 0, 1)


def augment(image: Tensor, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> Tensor:
    """Random rotation / zoom / crop / flips on a (C, H, W) tensor.

    Interpolation runs in float64 with reflect fill; the label of the sample
    is untouched by construction (transforms are geometric only).
    """
    if image.data.ndim != 3:
        raise ValueError(f"augment expects a (C, H, W) tensor, got {image.dims}")
    cfg = cfg or AugmentConfig()
    arr = image.data.astype(np.float64)

    do_rotate = rng.random() < cfg.rotation_probability
    angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    do_zoom = rng.random() < cfg.zoom_probability
    factor = rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1])
    do_crop = rng.random() < cfg.crop_probability
    u_top = rng.random()
    u_left = rng.random()
    do_hflip = rng.random() < cfg.flip_probability
    do_vflip = rng.random() < cfg.flip_probability

    if do_rotate and angle != 0.0:
        arr = _rotate(arr, angle)
    if do_zoom and factor != 1.0:
        arr = _zoom(arr, factor)
    if do_crop and cfg.crop_fraction < 1.0:
        arr = _crop_resize(arr, cfg.crop_fraction, u_top, u_left)
    if do_hflip:
        arr = arr[:, :, ::-1]
    if do_vflip:
        arr = arr[:, ::-1, :]
    return Tensor(np.ascontiguousarray(arr.astype(np.float32)))


# --- balancing ---------------------------------------------------------------

def balance_50_50(manifest: DatasetManifest,
                  rng: np.random.Generator) -> DatasetManifest:
    """Oversample the minority class until counts are equal.

    Originals are kept untouched and in order; duplicates are appended in
    whole cycles over the minority records, with an rng-chosen remainder.
    Each duplicate of a record gets the next augment seed for its
    (path, source) pair, so every copy augments differently.
    """
    counts = manifest.counts
    empty = [label for label, count in counts.items() if count == 0]
    if empty:
        raise DataError(
            f"cannot balance: class(es) {empty} have zero samples"
        )
    benign, malignant = counts["benign"], counts["malignant"]
    if benign == malignant:
        return manifest
    minority = "benign" if benign < malignant else "malignant"
    need = abs(benign - malignant)
    pool = [r for r in manifest.records if r.label == minority]

    next_seed = {}
    for record in manifest.records:
        key = (record.image_path, record.source_dataset)
        next_seed[key] = max(next_seed.get(key, 0), record.augment_seed + 1)

    def duplicate(record: SampleRecord) -> SampleRecord:
        key = (record.image_path, record.source_dataset)
        seed = next_seed[key]
        next_seed[key] = seed + 1
        return replace(record, augment_seed=seed)

    extras: list[SampleRecord] = []
    cycles, remainder = divmod(need, len(pool))
    for _ in range(cycles):
        extras.extend(duplicate(r) for r in pool)
    if remainder:
        chosen = rng.choice(len(pool), size=remainder, replace=False)
        extras.extend(duplicate(pool[i]) for i in sorted(chosen))
    return DatasetManifest(manifest.records + tuple(extras))


# --- the training loop -------------------------------------------------------

class EpochStats(NamedTuple):
    epoch: int
    loss: float
    accuracy: float


class TrainResult(NamedTuple):
    bundle: WeightBundle
    history: tuple[EpochStats, ...]


_TRAINABLE_SUFFIXES = (".kernel", ".bias", ".gamma", ".beta")


def _trainable_names(bundle: WeightBundle) -> list[str]:
    return [name for name in bundle.tensors
            if name.endswith(_TRAINABLE_SUFFIXES)]


def _record_tensor(record: SampleRecord, cfg: TrainConfig) -> np.ndarray:
    tensor = preprocess(record.image_path, cfg.image_size)
    if record.augment_seed > 0:
        identity = zlib.crc32(
            f"{record.source_dataset}|{record.image_path}".encode("utf-8")
        )
        rng = _generator(cfg.seed, _TAG_AUGMENT, identity, record.augment_seed)
        tensor = augment(tensor, rng, cfg.augment)
    return tensor.data


def _one_hot(label: str) -> np.ndarray:
    return np.array([1.0, 0.0] if label == "benign" else [0.0, 1.0],
                    dtype=np.float32)


def _train_step(
    bundle: WeightBundle,
    batch: Tensor,
    targets: np.ndarray,
) -> tuple[np.ndarray, float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One forward/backward pass in train mode.

    Returns (probabilities, mean loss, parameter gradients, updated running
    statistics). Unfolded conv inputs from the forward pass are kept on the
    tape and reused by the backward pass.
    """
    config = bundle.config
    batch_rows = batch.dims[0]
    tape: list[tuple] = []
    new_running: dict[str, np.ndarray] = {}
    x: Tensor = batch
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None

    for i, layer in enumerate(config.layers):
        if layer.kind == "conv":
            params = bundle.conv_params(i)
            out, col = tc.conv2d_dilated_cols(x, params)
            tape.append(("conv", i, x, params, col))
            x = out
        elif layer.kind == "batchnorm":
            prefix = f"layer{i:02d}"
            gamma = bundle.tensors[f"{prefix}.gamma"]
            result = tc.batch_norm(
                x,
                gamma,
                bundle.tensors[f"{prefix}.beta"],
                bundle.tensors[f"{prefix}.running_mean"],
                bundle.tensors[f"{prefix}.running_var"],
                mode="train",
            )
            new_running[f"{prefix}.running_mean"] = result.running_mean
            new_running[f"{prefix}.running_var"] = result.running_var
            tape.append(("batchnorm", i, x, gamma))
            x = result.output
        elif layer.kind == "relu":
            tape.append(("relu", i, x))
            x = tc.relu(x)
        elif layer.kind == "global_avg_pool":
            tape.append(("global_avg_pool", i, x.dims))
            logits = tc.global_avg_pool(x)
        else:  # softmax
            assert logits is not None
            probs = tc.softmax(logits)

    assert logits is not None and probs is not None
    loss = tc.categorical_cross_entropy(probs, targets)

    grads: dict[str, np.ndarray] = {}
    # categorical_cross_entropy averages over the batch, so the logit
    # gradient carries the 1/B factor.
    grad_flat = tc.cross_entropy_logit_grad(probs, targets) / np.float32(batch_rows)
    grad: Tensor | None = None
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "global_avg_pool":
            _, _, dims = entry
            grad = tc.global_avg_pool_backward(dims, grad_flat)
        elif kind == "relu":
            _, _, saved = entry
            grad = tc.relu_backward(saved, grad)
        elif kind == "batchnorm":
            _, i, saved, gamma = entry
            prefix = f"layer{i:02d}"
            result = tc.batch_norm_backward(saved, gamma, grad)
            grads[f"{prefix}.gamma"] = result.grad_gamma
            grads[f"{prefix}.beta"] = result.grad_beta
            grad = result.grad_input
        else:  # conv
            _, i, saved, params, col = entry
            prefix = f"layer{i:02d}"
            result = tc.conv2d_dilated_backward(saved, params, grad, _col=col)
            grads[f"{prefix}.kernel"] = result.grad_kernel.data
            if params.bias is not None:
                grads[f"{prefix}.bias"] = result.grad_bias
            grad = result.grad_input
    return probs, loss, grads, new_running


EpochCallback = Callable[[int, WeightBundle, EpochStats], bool | None]


def train(
    arch: ArchitectureConfig,
    manifest: DatasetManifest,
    cfg: TrainConfig | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> TrainResult:
    """Train from scratch on a manifest; fully deterministic given
    (cfg.seed, manifest).

    The manifest is 50:50-balanced first (a no-op when already balanced),
    every record is preprocessed (and, for oversampled duplicates,
    augmented) exactly once, and epochs run over freshly shuffled batches.
    on_epoch_end may return True to stop early; history covers the epochs
    actually run.
    """
    cfg = cfg or TrainConfig()
    if len(manifest) == 0:
        raise DataError("manifest has no records")

    with tc.engine_threads(threads=cfg.threads, deterministic=cfg.deterministic):
        bundle = init_weights(arch, seed=cfg.seed)
        balanced = balance_50_50(manifest, balance_rng(cfg.seed))
        logger.info("training on %d samples (%s)", len(balanced),
                    balanced.counts)

        inputs = np.stack([_record_tensor(r, cfg) for r in balanced.records])
        targets_all = np.stack([_one_hot(r.label) for r in balanced.records])
        n = len(balanced)

        trainable = {name: bundle.tensors[name]
                     for name in _trainable_names(bundle)}
        state = adam_init(trainable)
        history: list[EpochStats] = []

        for epoch in range(1, cfg.epochs + 1):
            order = _generator(cfg.seed, _TAG_SHUFFLE, epoch).permutation(n)
            loss_sum = 0.0
            correct = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = Tensor(np.ascontiguousarray(inputs[idx]))
                targets = targets_all[idx]
                probs, loss, grads, new_running = _train_step(
                    bundle, batch, targets
                )
                trainable, state = adam_step(trainable, grads, state, cfg)
                bundle.tensors.update(trainable)
                bundle.tensors.update(new_running)
                loss_sum += loss * len(idx)
                correct += int(
                    (probs.argmax(axis=1) == targets.argmax(axis=1)).sum()
                )
            stats = EpochStats(epoch, loss_sum / n, correct / n)
            history.append(stats)
            logger.info("epoch %d: loss %.4f accuracy %.4f",
                        stats.epoch, stats.loss, stats.accuracy)
            if on_epoch_end is not None and on_epoch_end(epoch, bundle, stats):
                break
    return TrainResult(bundle, tuple(history))


def save_history(history: Sequence[EpochStats], path) -> None:
    """History CSV: header epoch,loss,accuracy; floats in shortest
    round-trip form."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "loss", "accuracy"))
        for stats in history:
            writer.writerow((stats.epoch, repr(stats.loss),
                             repr(stats.accuracy)))


# --- synthetic fixture data --------------------------------------------------

def _blob_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency class: a coarse random grid upsampled bilinearly, so
    neighboring pixels are strongly correlated."""
    grid = max(2, size // 8)
    coarse = rng.uniform(0.1, 0.9, size=(grid, grid, 3))
    return bilinear_resize(coarse, size, size)


def _speckle_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """High-frequency class: independent per-pixel noise. Channel means match
    the blob class (~0.5), so the classes are not separable by mean color —
    only by spatial frequency, which a conv stack picks up easily."""
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


def synthetic_dataset(seed: int, n_per_class: int, out_dir,
                      size: int = 64) -> DatasetManifest:
    """Write a two-class procedural PNG dataset plus its manifest CSV.

    Byte-identical for the same (seed, n_per_class, size).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if size < 2:
        raise ValueError("size must be >= 2")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc

    rng = _generator(seed, _TAG_SYNTH)
    records: list[SampleRecord] = []
    for label, make in (("benign", _blob_image), ("malignant", _speckle_image)):
        for i in range(n_per_class):
            arr = make(rng, size)
            pixels = (arr * 255.0).round().astype(np.uint8)
            path = out_dir / f"{label}_{i:04d}.png"
            Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
            records.append(SampleRecord(str(path), label, "synth"))
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
