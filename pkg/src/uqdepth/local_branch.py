"""Convolutional branch: densely connected encoder with a bilinear-upsampling
decoder and skip connections."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BranchConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    growth_rate: int = 16
    layers_per_block: list[int] | int = 2
    input_size: int = 256
    d_max: float = 1.0

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ValueError("at least 2 encoder stages are required")
        if any(c <= 0 for c in self.stage_channels) or self.growth_rate <= 0:
            raise ValueError("channel counts must be positive")
        if self.input_size % (2 ** self.num_stages) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2**{self.num_stages}"
            )
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def block_layers(self) -> list[int]:
        if isinstance(self.layers_per_block, int):
            return [self.layers_per_block] * self.num_stages
        if len(self.layers_per_block) != self.num_stages:
            raise ValueError("layers_per_block must match stage_channels in length")
        return list(self.layers_per_block)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.num_stages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def densenet169(cls, input_size: int = 256, d_max: float = 1.0) -> "BranchConfig":
        """Widths and block depths of DenseNet-169 (stem 64, growth 32)."""
        return cls(
            stage_channels=[64, 128, 256, 640, 1664],
            growth_rate=32,
            layers_per_block=[0, 6, 12, 32, 32],
            input_size=input_size,
            d_max=d_max,
        )


class DenseLayer(nn.Module):
    def __init__(self, in_ch, growth):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_ch)
        self.conv = nn.Conv2d(in_ch, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(F.relu(self.norm(x)))], dim=1)


class DenseStage(nn.Module):
    """2x average-pool, dense block, 1x1 transition to ``out_ch``."""

    def __init__(self, in_ch, out_ch, n_layers, growth):
        super().__init__()
        layers = []
        ch = in_ch
        for _ in range(n_layers):
            layers.append(DenseLayer(ch, growth))
            ch += growth
        self.block = nn.Sequential(*layers)
        self.norm = nn.BatchNorm2d(ch)
        self.transition = nn.Conv2d(ch, out_ch, 1, bias=False)

    def forward(self, x):
        x = F.avg_pool2d(x, 2)
        x = self.block(x)
        return self.transition(F.relu(self.norm(x)))


class UpBlock(nn.Module):
    """Bilinear 2x upsample, concatenate the skip, two 3x3 convolutions."""

    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x, skip=None):
        size = skip.shape[-2:] if skip is not None else (x.shape[-2] * 2, x.shape[-1] * 2)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = F.leaky_relu(self.conv1(x), 0.2)
        return F.leaky_relu(self.conv2(x), 0.2)


class DepthHead(nn.Module):
    """3x3 convolution then sigmoid scaled to (0, d_max]."""

    def __init__(self, in_ch, d_max):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 1, 3, padding=1)
        self.d_max = d_max

    def init_head(self):
        # start unsaturated at d_max / 2
        nn.init.normal_(self.conv.weight, 0.0, 1e-3)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.d_max * torch.sigmoid(self.conv(x))


class LocalBranch(nn.Module):
    def __init__(self, config: BranchConfig | None = None):
        super().__init__()
        self.config = config = config or BranchConfig()
        chans = config.stage_channels
        layers = config.block_layers()

        stem = [nn.Conv2d(3, chans[0], 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(chans[0]), nn.ReLU()]
        self.stem = nn.Sequential(*stem)
        self.stages = nn.ModuleList(
            DenseStage(chans[i - 1], chans[i], layers[i], config.growth_rate)
            for i in range(1, len(chans))
        )

        # decoder widths halve the matching encoder width
        ups = []
        in_ch = chans[-1]
        for i in range(len(chans) - 2, -1, -1):
            out_ch = max(chans[i] // 2, 8)
            ups.append(UpBlock(in_ch, chans[i], out_ch))
            in_ch = out_ch
        self.ups = nn.ModuleList(ups)
        self.final_up = UpBlock(in_ch, 0, in_ch)
        self.feature_channels = in_ch
        self.head = DepthHead(in_ch, config.d_max)

    def encode(self, image):
        feats = [self.stem(image)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats

    def forward(self, image):
        size = self.config.input_size
        if image.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(image.shape[-2:])}")
        feats = self.encode(image)
        x = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = up(x, skip)
        x = self.final_up(x)
        return self.head(x), x
