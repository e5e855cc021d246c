"""Architecture configs, the default Mela-D stack, accounting, and inference.

A network is an ordered list of layer specs (conv / batchnorm / relu /
global_avg_pool / softmax). The default Mela-D stack is a full-resolution
dilated stack: seven 3x3 conv blocks with dilations [1, 1, 1, 2, 4, 8, 1],
each followed by batchnorm and relu, then a 1x1 conv down to the two class
channels, global average pooling, and a binary softmax. There is no striding
or spatial pooling before the global pool, so any input size >= 1x1 runs.

Class channel order is fixed everywhere: index 0 = benign, index 1 =
malignant. Probability ties are labeled benign and flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterator

import numpy as np

from .errors import MeladError
from . import tensor_core as tc
from .tensor_core import ConvParams, Tensor

CLASS_NAMES = ("benign", "malignant")
LAYER_KINDS = ("conv", "batchnorm", "relu", "global_avg_pool", "softmax")

MELA_D_DILATIONS = (1, 1, 1, 2, 4, 8, 1)
BUILTIN_CONFIGS = ("mela-d", "mela-d-lite", "resnet50-reference")


class ConfigError(MeladError):
    """Malformed or non-executable architecture configuration."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Conv layers carry shape fields; the rest are parameter-free
    markers except batchnorm, whose width is inferred from the preceding conv."""

    kind: str
    in_ch: int | None = None
    out_ch: int | None = None
    kernel_size: int | None = None
    dilation: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            for name in ("in_ch", "out_ch", "kernel_size"):
                value = getattr(self, name)
                if not isinstance(value, int) or value < 1:
                    raise ConfigError(f"conv layer needs positive integer {name}")
            if self.kernel_size % 2 == 0:
                raise ConfigError(
                    f"kernel_size must be odd for same padding, got {self.kernel_size}"
                )
            if self.dilation < 1:
                raise ConfigError(f"dilation must be >= 1, got {self.dilation}")

    def to_json(self) -> dict:
        if self.kind == "conv":
            return {
                "kind": "conv",
                "in_ch": self.in_ch,
                "out_ch": self.out_ch,
                "kernel_size": self.kernel_size,
                "dilation": self.dilation,
                "bias": self.bias,
            }
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ConfigError(f"layer entry must be an object with a kind: {obj!r}")
        kind = obj["kind"]
        if kind == "conv":
            try:
                return cls(
                    kind="conv",
                    in_ch=obj["in_ch"],
                    out_ch=obj["out_ch"],
                    kernel_size=obj["kernel_size"],
                    dilation=obj.get("dilation", 1),
                    bias=obj.get("bias", True),
                )
            except KeyError as exc:
                raise ConfigError(f"conv layer missing field {exc}") from exc
        return cls(kind=kind)


@dataclass(frozen=True)
class ArchitectureConfig:
    name: str
    input_channels: int = 3
    input_height: int = 150
    input_width: int = 150
    layers: tuple[LayerSpec, ...] = ()
    reference_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()

    def _validate(self) -> None:
        if self.input_channels < 1 or self.input_height < 1 or self.input_width < 1:
            raise ConfigError("input extents must be >= 1")
        if not self.layers:
            raise ConfigError("config has no layers")
        if self.reference_only:
            return
        # Executable configs: channels must chain, and the tail must be
        # exactly one global_avg_pool followed by softmax over two classes.
        current = self.input_channels
        pool_seen = False
        for i, layer in enumerate(self.layers):
            if pool_seen and layer.kind != "softmax":
                raise ConfigError(
                    f"layer {i}: only softmax may follow global_avg_pool"
                )
            if layer.kind == "conv":
                if layer.in_ch != current:
                    raise ConfigError(
                        f"layer {i}: conv expects {layer.in_ch} input channels "
                        f"but receives {current}"
                    )
                current = layer.out_ch
            elif layer.kind == "global_avg_pool":
                if pool_seen:
                    raise ConfigError("config has more than one global_avg_pool")
                pool_seen = True
        if not pool_seen:
            raise ConfigError("config is missing the global_avg_pool tail")
        if self.layers[-1].kind != "softmax":
            raise ConfigError("config must end with softmax")
        if current != len(CLASS_NAMES):
            raise ConfigError(
                f"class count must be {len(CLASS_NAMES)}, got {current}"
            )

    def channel_widths(self) -> list[int]:
        """Channel count feeding each layer (batchnorm width lives here)."""
        widths = []
        current = self.input_channels
        for layer in self.layers:
            widths.append(current)
            if layer.kind == "conv":
                current = layer.out_ch
        return widths

    def parameterized_layers(self) -> Iterator[tuple[int, LayerSpec, int]]:
        """Yield (index, spec, width) for layers that own parameter tensors."""
        for i, (layer, width) in enumerate(zip(self.layers, self.channel_widths())):
            if layer.kind in ("conv", "batchnorm"):
                yield i, layer, width

    def to_json(self) -> dict:
        obj = {
            "name": self.name,
            "input": {
                "channels": self.input_channels,
                "height": self.input_height,
                "width": self.input_width,
            },
            "layers": [layer.to_json() for layer in self.layers],
        }
        if self.reference_only:
            obj["reference_only"] = True
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureConfig":
        try:
            inp = obj["input"]
            return cls(
                name=obj["name"],
                input_channels=inp["channels"],
                input_height=inp["height"],
                input_width=inp["width"],
                layers=tuple(LayerSpec.from_json(e) for e in obj["layers"]),
                reference_only=bool(obj.get("reference_only", False)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture config: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


def load_config(path) -> ArchitectureConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"architecture config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"architecture config {path} is not valid JSON: {exc}")
    return ArchitectureConfig.from_json(obj)


def builtin_config(name: str) -> ArchitectureConfig:
    """Load one of the shipped configs: mela-d, mela-d-lite, resnet50-reference."""
    if name not in BUILTIN_CONFIGS:
        raise ConfigError(
            f"unknown builtin config {name!r}; available: {', '.join(BUILTIN_CONFIGS)}"
        )
    text = resources.files("melad.configs").joinpath(f"{name}.json").read_text("utf-8")
    return ArchitectureConfig.from_json(json.loads(text))


def default_mela_d(channels: int = 128, name: str | None = None) -> ArchitectureConfig:
    """The default dilated stack. channels is the width of every hidden block."""
    if channels < 2:
        raise ConfigError(f"channels must be >= 2, got {channels}")
    layers: list[LayerSpec] = []
    in_ch = 3
    for dilation in MELA_D_DILATIONS:
        layers.append(LayerSpec("conv", in_ch=in_ch, out_ch=channels,
                                kernel_size=3, dilation=dilation, bias=True))
        layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("relu"))
        in_ch = channels
    layers.append(LayerSpec("conv", in_ch=channels, out_ch=len(CLASS_NAMES),
                            kernel_size=1, dilation=1, bias=True))
    layers.append(LayerSpec("global_avg_pool"))
    layers.append(LayerSpec("softmax"))
    return ArchitectureConfig(
        name=name or f"mela-d-{channels}",
        input_channels=3,
        input_height=150,
        input_width=150,
        layers=tuple(layers),
    )


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    non_trainable: int

    @property
    def total(self) -> int:
        return self.trainable + self.non_trainable


def count_params(config: ArchitectureConfig) -> ParamCount:
    """Parameter totals: conv k^2*in*out (+out if bias); batchnorm 2*width
    trainable plus 2*width running statistics counted as non-trainable."""
    trainable = 0
    non_trainable = 0
    for _, layer, width in config.parameterized_layers():
        if layer.kind == "conv":
            trainable += layer.kernel_size ** 2 * layer.in_ch * layer.out_ch
            if layer.bias:
                trainable += layer.out_ch
        else:
            trainable += 2 * width
            non_trainable += 2 * width
    return ParamCount(trainable, non_trainable)


def receptive_field(config: ArchitectureConfig) -> int:
    """1 + sum over convs of dilation * (kernel_size - 1) for a stride-1 stack."""
    rf = 1
    for layer in config.layers:
        if layer.kind == "conv":
            rf += layer.dilation * (layer.kernel_size - 1)
    return rf


# Per-element costs for the parameter-free layers. Batchnorm folds to one
# scale and one shift; softmax is shift, exp, accumulate, divide.
_ELEMENT_FLOPS = {"batchnorm": 2, "relu": 1, "global_avg_pool": 1, "softmax": 4}


def count_flops(config: ArchitectureConfig, input_size: int | tuple[int, int] | None = None) -> int:
    """Forward-pass cost: conv layers at 2*k^2*in*out*H*W (multiply-add = 2),
    other layers at per-element cost. Spatial size is preserved throughout."""
    if input_size is None:
        h, w = config.input_height, config.input_width
    elif isinstance(input_size, int):
        h = w = input_size
    else:
        h, w = input_size
    total = 0
    for layer, width in zip(config.layers, config.channel_widths()):
        if layer.kind == "conv":
            total += 2 * layer.kernel_size ** 2 * layer.in_ch * layer.out_ch * h * w
        elif layer.kind in ("batchnorm", "relu"):
            total += _ELEMENT_FLOPS[layer.kind] * width * h * w
        elif layer.kind == "global_avg_pool":
            total += _ELEMENT_FLOPS[layer.kind] * width * h * w
        else:
            total += _ELEMENT_FLOPS[layer.kind] * width
    return total


@dataclass(frozen=True)
class Prediction:
    p_benign: float
    p_malignant: float
    label: str
    logits: tuple[float, float]

    @property
    def is_tie(self) -> bool:
        return self.p_benign == self.p_malignant

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "p_benign": self.p_benign,
            "p_malignant": self.p_malignant,
        }


class WeightError(MeladError):
    """Weight tensors inconsistent with their architecture config."""


def tensor_names_for(config: ArchitectureConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Expected bundle entries in layer order: (name, shape)."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    for i, layer, width in config.parameterized_layers():
        prefix = f"layer{i:02d}"
        if layer.kind == "conv":
            entries.append((f"{prefix}.kernel",
                            (layer.out_ch, layer.in_ch,
                             layer.kernel_size, layer.kernel_size)))
            if layer.bias:
                entries.append((f"{prefix}.bias", (layer.out_ch,)))
        else:
            for part in ("gamma", "beta", "running_mean", "running_var"):
                entries.append((f"{prefix}.{part}", (width,)))
    return entries


@dataclass
class WeightBundle:
    """An architecture config plus its named parameter tensors in layer order."""

    config: ArchitectureConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = tensor_names_for(self.config)
        expected_names = [name for name, _ in expected]
        got_names = list(self.tensors)
        if got_names != expected_names:
            missing = [n for n in expected_names if n not in self.tensors]
            extra = [n for n in got_names if n not in expected_names]
            detail = []
            if missing:
                detail.append(f"missing {missing}")
            if extra:
                detail.append(f"unexpected {extra}")
            if not detail:
                detail.append("tensor order does not follow layer order")
            raise WeightError("weight bundle does not match config: " + "; ".join(detail))
        for name, shape in expected:
            arr = self.tensors[name]
            if arr.shape != shape:
                raise WeightError(
                    f"tensor {name} has shape {arr.shape}, config requires {shape}"
                )
            if arr.dtype != np.float32:
                raise WeightError(f"tensor {name} must be float32, got {arr.dtype}")

    def conv_params(self, layer_index: int) -> ConvParams:
        layer = self.config.layers[layer_index]
        prefix = f"layer{layer_index:02d}"
        kernel = Tensor(self.tensors[f"{prefix}.kernel"])
        bias = self.tensors.get(f"{prefix}.bias") if layer.bias else None
        return ConvParams(kernel=kernel, bias=bias, dilation=layer.dilation)

    def copy(self) -> "WeightBundle":
        return WeightBundle(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_weights(config: ArchitectureConfig, seed: int = 0) -> WeightBundle:
    """He-uniform conv kernels, zero biases, identity batchnorm."""
    if config.reference_only:
        raise ConfigError(f"config {config.name!r} is reference-only, not executable")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    tensors: dict[str, np.ndarray] = {}
    for i, layer, width in config.parameterized_layers():
        prefix = f"layer{i:02d}"
        if layer.kind == "conv":
            fan_in = layer.in_ch * layer.kernel_size ** 2
            limit = np.sqrt(6.0 / fan_in)
            shape = (layer.out_ch, layer.in_ch, layer.kernel_size, layer.kernel_size)
            tensors[f"{prefix}.kernel"] = rng.uniform(
                -limit, limit, size=shape
            ).astype(np.float32)
            if layer.bias:
                tensors[f"{prefix}.bias"] = np.zeros(layer.out_ch, dtype=np.float32)
        else:
            tensors[f"{prefix}.gamma"] = np.ones(width, dtype=np.float32)
            tensors[f"{prefix}.beta"] = np.zeros(width, dtype=np.float32)
            tensors[f"{prefix}.running_mean"] = np.zeros(width, dtype=np.float32)
            tensors[f"{prefix}.running_var"] = np.ones(width, dtype=np.float32)
    return WeightBundle(config, tensors)


def zero_weights(config: ArchitectureConfig) -> WeightBundle:
    """All-zero kernels and biases (batchnorm stays identity); logits come out
    (0, 0), probabilities (0.5, 0.5)."""
    bundle = init_weights(config, seed=0)
    for name, arr in bundle.tensors.items():
        if name.endswith(".kernel"):
            bundle.tensors[name] = np.zeros_like(arr)
    return bundle


def run_layers(bundle: WeightBundle, image: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Apply the stack in inference mode; return (logits, probabilities)."""
    config = bundle.config
    if config.reference_only:
        raise ConfigError(f"config {config.name!r} is reference-only, not executable")
    if image.data.ndim != 3:
        raise ValueError(f"expected a single (C, H, W) image, got dims {image.dims}")
    if image.dims[0] != config.input_channels:
        raise ValueError(
            f"image has {image.dims[0]} channels, config expects "
            f"{config.input_channels}"
        )
    x: Tensor | np.ndarray = image
    logits: np.ndarray | None = None
    for i, layer in enumerate(config.layers):
        if layer.kind == "conv":
            x = tc.conv2d_dilated(x, bundle.conv_params(i))
        elif layer.kind == "batchnorm":
            prefix = f"layer{i:02d}"
            x = tc.batch_norm(
                x,
                bundle.tensors[f"{prefix}.gamma"],
                bundle.tensors[f"{prefix}.beta"],
                bundle.tensors[f"{prefix}.running_mean"],
                bundle.tensors[f"{prefix}.running_var"],
                mode="infer",
            ).output
        elif layer.kind == "relu":
            x = tc.relu(x)
        elif layer.kind == "global_avg_pool":
            logits = tc.global_avg_pool(x)
            x = logits
        else:  # softmax
            x = tc.softmax(x)
    assert logits is not None
    return logits, x


def forward(
    bundle: WeightBundle,
    image: Tensor,
    deterministic: bool = False,
    threads: int | None = None,
) -> Prediction:
    """Classify one preprocessed (3, H, W) image."""
    with tc.engine_threads(threads=threads, deterministic=deterministic):
        logits, probs = run_layers(bundle, image)
    p_benign, p_malignant = float(probs[0]), float(probs[1])
    label = CLASS_NAMES[1] if p_malignant > p_benign else CLASS_NAMES[0]
    return Prediction(
        p_benign=p_benign,
        p_malignant=p_malignant,
        label=label,
        logits=(float(logits[0]), float(logits[1])),
    )
