"""Regenerate the shipped architecture configs.

Writes mela-d.json, mela-d-lite.json, and resnet50-reference.json into
src/melad/configs/, asserting the hand-derived parameter totals before
anything lands on disk.

The ResNet50 entry is a counting reference only (reference_only: true): the
layer list mirrors the stock Keras build — stem conv7x7+BN, bottleneck
stages of [3, 4, 6, 3] blocks (1x1 -> 3x3 -> 1x1, each conv with bias and
BN, projection shortcut on each stage's first block), and the 1000-way
dense head expressed as a 1x1 conv. Strides are irrelevant to parameter
counts and are not modeled; the engine refuses to execute the config.

Run from the repository root:  python tools/gen_configs.py
"""

from __future__ import annotations

import sys
from pathlib import Path

SRC = Path(__file__).resolve().parent.parent / "src"
sys.path.insert(0, str(SRC))

from melad.model import (  # noqa: E402
    ArchitectureConfig,
    LayerSpec,
    count_params,
    default_mela_d,
    receptive_field,
)

CONFIG_DIR = SRC / "melad" / "configs"

RESNET50_STAGES = ((3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048))


def resnet50_reference() -> ArchitectureConfig:
    layers: list[LayerSpec] = []

    def conv_bn(in_ch: int, out_ch: int, k: int) -> None:
        layers.append(LayerSpec("conv", in_ch=in_ch, out_ch=out_ch,
                                kernel_size=k, dilation=1, bias=True))
        layers.append(LayerSpec("batchnorm"))

    conv_bn(3, 64, 7)
    layers.append(LayerSpec("relu"))
    in_ch = 64
    for blocks, squeeze, out in RESNET50_STAGES:
        for block in range(blocks):
            conv_bn(in_ch, squeeze, 1)
            layers.append(LayerSpec("relu"))
            conv_bn(squeeze, squeeze, 3)
            layers.append(LayerSpec("relu"))
            conv_bn(squeeze, out, 1)
            if block == 0:
                conv_bn(in_ch, out, 1)  # projection shortcut
            layers.append(LayerSpec("relu"))
            in_ch = out
    layers.append(LayerSpec("global_avg_pool"))
    layers.append(LayerSpec("conv", in_ch=2048, out_ch=1000,
                            kernel_size=1, dilation=1, bias=True))
    layers.append(LayerSpec("softmax"))
    return ArchitectureConfig(
        name="resnet50-reference",
        input_channels=3,
        input_height=224,
        input_width=224,
        layers=tuple(layers),
        reference_only=True,
    )


def main() -> None:
    mela_d = default_mela_d(128, name="mela-d")
    lite = default_mela_d(32, name="mela-d-lite")
    resnet = resnet50_reference()

    counts = count_params(mela_d)
    assert counts.trainable == 891_138, counts
    assert counts.non_trainable == 1_792, counts
    assert receptive_field(mela_d) == 37

    lite_counts = count_params(lite)
    assert lite_counts.trainable == 56_898, lite_counts
    assert receptive_field(lite) == 37

    resnet_counts = count_params(resnet)
    assert resnet_counts.trainable == 25_583_592, resnet_counts
    assert resnet_counts.non_trainable == 53_120, resnet_counts
    assert resnet_counts.total == 25_636_712, resnet_counts

    CONFIG_DIR.mkdir(parents=True, exist_ok=True)
    for config in (mela_d, lite, resnet):
        path = CONFIG_DIR / f"{config.name}.json"
        config.save(path)
        c = count_params(config)
        print(f"{path}: trainable {c.trainable:,}, total {c.total:,}")


if __name__ == "__main__":
    main()
