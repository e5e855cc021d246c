"""Shared fixtures: small executable architectures and image factories."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from melad import ArchitectureConfig, LayerSpec


def conv_block(in_ch: int, out_ch: int, dilation: int = 1,
               kernel_size: int = 3) -> list[LayerSpec]:
    return [
        LayerSpec("conv", in_ch=in_ch, out_ch=out_ch,
                  kernel_size=kernel_size, dilation=dilation),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
    ]


def make_tiny_arch(channels: int = 4, name: str = "tiny") -> ArchitectureConfig:
    """Small but structurally complete network: dilated conv blocks, a 1x1
    head, pooling, softmax. Fast enough to train in tests."""
    layers = (
        conv_block(3, channels, dilation=1)
        + conv_block(channels, channels, dilation=2)
        + [
            LayerSpec("conv", in_ch=channels, out_ch=2, kernel_size=1),
            LayerSpec("global_avg_pool"),
            LayerSpec("softmax"),
        ]
    )
    return ArchitectureConfig(name=name, input_height=16, input_width=16,
                              layers=tuple(layers))


@pytest.fixture
def tiny_arch() -> ArchitectureConfig:
    return make_tiny_arch()


def write_png(path, pixels: np.ndarray) -> None:
    """pixels: (H, W, 3) uint8."""
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(
        path, format="PNG")


def write_random_png(path, rng: np.random.Generator, size: int = 16) -> None:
    write_png(path, rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))


def write_constant_png(path, value: int, size: int = 16) -> None:
    write_png(path, np.full((size, size, 3), value, dtype=np.uint8))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
