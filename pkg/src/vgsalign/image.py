"""DenseNet image embedder and the crop/flip preprocessing around it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import core

CROP = 224


@dataclass(frozen=True)
class ImageEmbedderConfig:
    N: int = 1024
    growth: int = 32
    block_config: tuple[int, ...] = (6, 12, 64, 48)
    init_features: int = 64
    bottleneck_mult: int = 4
    compression: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "block_config", tuple(int(b) for b in self.block_config))
        if min((self.N, self.growth, self.init_features, self.bottleneck_mult, *self.block_config)) <= 0:
            raise ValueError("image embedder sizes must be positive")

    def block_channels(self) -> list[tuple[int, int]]:
        """(input, output) channel counts for each dense block."""
        out = []
        c = self.init_features
        for i, n_layers in enumerate(self.block_config):
            end = c + n_layers * self.growth
            out.append((c, end))
            c = end if i == len(self.block_config) - 1 else int(end * self.compression)
        return out

    @property
    def n_features(self) -> int:
        return self.block_channels()[-1][1]


def image_param_count(config: ImageEmbedderConfig, head: bool = True) -> int:
    g, width = config.growth, config.bottleneck_mult * config.growth
    total = 3 * config.init_features * 49 + 2 * config.init_features
    blocks = config.block_channels()
    for i, (c_in, c_out) in enumerate(blocks):
        for layer in range(config.block_config[i]):
            c = c_in + layer * g
            total += 2 * c + c * width + 2 * width + width * g * 9
        if i < len(blocks) - 1:
            total += 2 * c_out + c_out * int(c_out * config.compression)
    total += 2 * config.n_features
    if head:
        total += config.n_features * config.N + config.N
    return total


class BatchNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return core.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


def _conv_weight(c_out: int, c_in: int, k: int) -> nn.Parameter:
    return nn.Parameter(torch.empty(c_out, c_in, k, k))


class DenseLayer(nn.Module):
    """BN-ReLU-Conv(1x1)-BN-ReLU-Conv(3x3); returns only the ``growth`` new maps."""

    def __init__(self, c_in: int, growth: int, bottleneck_mult: int = 4):
        super().__init__()
        width = bottleneck_mult * growth
        self.norm1 = BatchNorm(c_in)
        self.conv1 = _conv_weight(width, c_in, 1)
        self.norm2 = BatchNorm(width)
        self.conv2 = _conv_weight(growth, width, 3)

    def forward(self, x: Tensor) -> Tensor:
        y = core.conv2d(core.relu(self.norm1(x)), self.conv1)
        return core.conv2d(core.relu(self.norm2(y)), self.conv2, padding=1)


class DenseBlock(nn.Module):
    def __init__(self, c_in: int, n_layers: int, growth: int, bottleneck_mult: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(
            DenseLayer(c_in + i * growth, growth, bottleneck_mult) for i in range(n_layers)
        )

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class Transition(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm = BatchNorm(c_in)
        self.conv = _conv_weight(c_out, c_in, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2:
            raise core.ShapeError("transition needs an even channel count")
        return core.pool(core.conv2d(core.relu(self.norm(x)), self.conv), "avg", 2, 2)


class ImageEmbedder(nn.Module):
    def __init__(self, config: ImageEmbedderConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        c = config
        self.stem_conv = _conv_weight(c.init_features, 3, 7)
        self.stem_norm = BatchNorm(c.init_features)
        blocks, transitions = [], []
        channels = c.block_channels()
        for i, (c_in, c_out) in enumerate(channels):
            blocks.append(DenseBlock(c_in, c.block_config[i], c.growth, c.bottleneck_mult))
            if i < len(channels) - 1:
                transitions.append(Transition(c_out, int(c_out * c.compression)))
        self.blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)
        self.final_norm = BatchNorm(c.n_features)
        self.head_weight = nn.Parameter(torch.empty(c.N, c.n_features))
        self.head_bias = nn.Parameter(torch.empty(c.N))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = None if seed is None else torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() == 4:
                    fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                    p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            bound = 1.0 / math.sqrt(self.config.n_features)
            self.head_weight.uniform_(-bound, bound, generator=gen)
            self.head_bias.zero_()

    def features(self, x: Tensor) -> Tensor:
        x = core.conv2d(x, self.stem_conv, stride=2, padding=3)
        x = core.pool(core.relu(self.stem_norm(x)), "max", 3, 2, padding=1)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.transitions):
                x = self.transitions[i](x)
        return core.pool(core.relu(self.final_norm(x)), "global_avg")

    def forward(self, x: Tensor) -> Tensor:
        return core.l2_normalize(core.linear(self.features(x), self.head_weight, self.head_bias))


def augment_train(img: np.ndarray, rng: np.random.Generator, size: int = CROP) -> np.ndarray:
    """Uniform random ``size`` crop plus horizontal flip with probability 0.5 on a (3, H, W) array."""
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than the {size}x{size} crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = img[:, top : top + size, left : left + size]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def preprocess_eval(img: np.ndarray, size: int = CROP) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than the {size}x{size} crop")
    top, left = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(img[:, top : top + size, left : left + size])


def embed_image(img: np.ndarray, model: ImageEmbedder) -> np.ndarray:
    """Embed one preprocessed (3, 224, 224) raster; the model must be in eval mode for determinism."""
    if img.shape[-2:] != (CROP, CROP) or img.shape[0] != 3:
        raise core.ShapeError(f"expected a 3x{CROP}x{CROP} input, got {tuple(img.shape)}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model(torch.as_tensor(img, dtype=dtype).unsqueeze(0))[0].numpy()
