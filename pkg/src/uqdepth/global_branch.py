"""Attention branch: overlapping patch embeddings, spatially-reduced
self-attention encoder, and a conv/BN/ReLU decoder fusing all stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .local_branch import DepthHead


@dataclass
class GlobalBranchConfig:
    embed_dims: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    num_heads: list[int] = field(default_factory=lambda: [1, 1, 2, 4])
    reduction_ratios: list[int] = field(default_factory=lambda: [8, 4, 2, 1])
    depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    mlp_ratio: int = 4
    mlp_dropout: float = 0.5
    decoder_dim: int = 32
    input_size: int = 256
    d_max: float = 1.0

    def __post_init__(self):
        n = len(self.embed_dims)
        if not (len(self.num_heads) == len(self.reduction_ratios) == len(self.depths) == n):
            raise ValueError("per-stage lists must have equal length")
        if not 0.0 <= self.mlp_dropout < 1.0:
            raise ValueError("mlp_dropout must lie in [0, 1)")
        for d, h in zip(self.embed_dims, self.num_heads):
            if d % h:
                raise ValueError(f"embed dim {d} not divisible by {h} heads")
        if self.input_size % self.total_stride:
            raise ValueError(f"input_size {self.input_size} not divisible by {self.total_stride}")

    @property
    def strides(self) -> list[int]:
        return [4] + [2] * (len(self.embed_dims) - 1)

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    def stage_resolutions(self) -> list[int]:
        res, size = [], self.input_size
        for s in self.strides:
            size //= s
            res.append(size)
        return res

    def to_dict(self) -> dict:
        return asdict(self)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, patch_size, stride, in_ch, dim):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, patch_size, stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class EfficientSelfAttention(nn.Module):
    """Multi-head attention with keys/values from a strided-conv reduced map."""

    def __init__(self, dim, num_heads, reduction):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.reduction = reduction
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, reduction, stride=reduction)
            self.sr_norm = nn.LayerNorm(dim)

    def _split(self, t):
        b, n, c = t.shape
        return t.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def attention(self, x, h, w):
        """Return (attention probabilities [B, heads, N, M], values)."""
        b, n, c = x.shape
        q = self._split(self.q(x))
        if self.reduction > 1:
            kv_in = x.transpose(1, 2).reshape(b, c, h, w)
            kv_in = self.sr(kv_in).flatten(2).transpose(1, 2)
            kv_in = self.sr_norm(kv_in)
        else:
            kv_in = x
        k, v = self.kv(kv_in).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        return attn, v

    def forward(self, x, h, w):
        attn, v = self.attention(x, h, w)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class MixMLP(nn.Module):
    def __init__(self, dim, hidden, dropout):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        x = self.drop(F.gelu(x))
        return self.drop(self.fc2(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim, num_heads, reduction, mlp_ratio, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, num_heads, reduction)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixMLP(dim, dim * mlp_ratio, dropout)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class EncoderStage(nn.Module):
    def __init__(self, patch, stride, in_ch, dim, heads, reduction, depth, mlp_ratio, dropout):
        super().__init__()
        self.embed = OverlapPatchEmbed(patch, stride, in_ch, dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, reduction, mlp_ratio, dropout) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x, h, w = self.embed(x)
        for blk in self.blocks:
            x = blk(x, h, w)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


def conv_bn_relu(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class GlobalBranch(nn.Module):
    def __init__(self, config: GlobalBranchConfig | None = None):
        super().__init__()
        self.config = cfg = config or GlobalBranchConfig()
        stages = []
        in_ch = 3
        for i, dim in enumerate(cfg.embed_dims):
            patch = 7 if i == 0 else 3
            stages.append(
                EncoderStage(patch, cfg.strides[i], in_ch, dim, cfg.num_heads[i],
                             cfg.reduction_ratios[i], cfg.depths[i], cfg.mlp_ratio, cfg.mlp_dropout)
            )
            in_ch = dim
        self.stages = nn.ModuleList(stages)

        dd = cfg.decoder_dim
        self.lateral = nn.ModuleList(nn.Conv2d(d, dd, 1) for d in cfg.embed_dims)
        self.fuse = nn.ModuleList(conv_bn_relu(2 * dd, dd) for _ in cfg.embed_dims[:-1])
        # stride-4 stem leaves two 2x steps back to full resolution
        self.refine = nn.ModuleList([conv_bn_relu(dd, dd), conv_bn_relu(dd, dd)])
        self.feature_channels = dd
        self.head = DepthHead(dd, cfg.d_max)

    def encode(self, image):
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, image):
        size = self.config.input_size
        if image.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(image.shape[-2:])}")
        feats = self.encode(image)
        x = self.lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            lat = self.lateral[i](feats[i])
            x = F.interpolate(x, size=lat.shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuse[i](torch.cat([x, lat], dim=1))
        for block in self.refine:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(x)
        return self.head(x), x
