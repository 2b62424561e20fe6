"""Uncertainty heads, confidence transform, softmax fusion and the full
two-branch model (including the ablation variants)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .global_branch import GlobalBranch, GlobalBranchConfig
from .local_branch import BranchConfig, LocalBranch

SIGMA_MIN = 1e-3

MODES = (
    "uncertainty-fusion",
    "concat",
    "merge-equally",
    "local-only",
    "global-only",
    "cnn+cnn",
    "transformer+transformer",
)
SINGLE_BRANCH_MODES = ("local-only", "global-only")


class ConfigError(ValueError):
    pass


@dataclass
class ModelOutput:
    depth_fused: torch.Tensor
    depth_local: torch.Tensor | None = None
    depth_global: torch.Tensor | None = None
    sigma_local: torch.Tensor | None = None
    sigma_global: torch.Tensor | None = None
    w_local: torch.Tensor | None = None
    w_global: torch.Tensor | None = None

    @property
    def weights(self):
        if self.w_local is None:
            return None
        return self.w_global, self.w_local

    def missing(self) -> list[str]:
        names = ("depth_local", "depth_global", "sigma_local", "sigma_global")
        return [n for n in names if getattr(self, n) is None]


class UncertaintyHead(nn.Module):
    """3x3 convolution + ReLU, floored at ``sigma_min``."""

    def __init__(self, in_ch: int, sigma_min: float = SIGMA_MIN, sigma_init: float = 0.5):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 1, 3, padding=1)
        self.sigma_min = sigma_min
        self.sigma_init = sigma_init

    def init_head(self):
        # start at a uniform sigma_init; at sigma_min the 1/sigma MAP gradient swamps the depth terms
        nn.init.normal_(self.conv.weight, 0.0, 1e-3)
        nn.init.constant_(self.conv.bias, self.sigma_init)

    def forward(self, features, size=None):
        sigma = F.relu(self.conv(features))
        if size is not None and sigma.shape[-2:] != tuple(size):
            sigma = F.interpolate(sigma, size=size, mode="bilinear", align_corners=False)
        return torch.clamp(sigma, min=self.sigma_min)


def confidence(sigma):
    """sigmoid(exp(-sigma)); lies in (0.5, sigmoid(1)] for sigma >= 0."""
    return torch.sigmoid(torch.exp(-sigma))


def fusion_weights(c_global, c_local):
    """Two-way softmax (base e) over the branch confidences."""
    if c_global.shape != c_local.shape:
        raise ValueError(f"confidence shapes differ: {tuple(c_global.shape)} vs {tuple(c_local.shape)}")
    w = torch.softmax(torch.stack([c_global, c_local], dim=0), dim=0)
    return w[0], w[1]


def fuse(depth_global, depth_local, c_global, c_local):
    """Return (fused depth, (w_global, w_local))."""
    shapes = {tuple(t.shape) for t in (depth_global, depth_local, c_global, c_local)}
    if len(shapes) != 1:
        raise ValueError(f"fusion inputs differ in shape: {sorted(shapes)}")
    w_global, w_local = fusion_weights(c_global, c_local)
    return w_global * depth_global + w_local * depth_local, (w_global, w_local)


@dataclass
class ModelConfig:
    input_size: int = 256
    d_max: float = 1.0
    mode: str = "uncertainty-fusion"
    sigma_min: float = SIGMA_MIN
    sigma_init: float = 0.5
    local: BranchConfig = field(default_factory=BranchConfig)
    global_: GlobalBranchConfig = field(default_factory=GlobalBranchConfig)

    def __post_init__(self):
        if isinstance(self.local, dict):
            self.local = BranchConfig(**self.local)
        if isinstance(self.global_, dict):
            self.global_ = GlobalBranchConfig(**self.global_)
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        for sub in (self.local, self.global_):
            sub.input_size = self.input_size
            sub.d_max = self.d_max
            sub.__post_init__()

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "d_max": self.d_max,
            "mode": self.mode,
            "sigma_min": self.sigma_min,
            "sigma_init": self.sigma_init,
            "local": self.local.to_dict(),
            "global_": self.global_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def slot_kinds(self) -> tuple[str | None, str | None]:
        """Branch architecture in the (local, global) slots for this mode."""
        return {
            "local-only": ("local", None),
            "global-only": (None, "global"),
            "cnn+cnn": ("local", "local"),
            "transformer+transformer": ("global", "global"),
        }.get(self.mode, ("local", "global"))


def build_branch(kind: str, cfg: ModelConfig) -> nn.Module:
    return LocalBranch(cfg.local) if kind == "local" else GlobalBranch(cfg.global_)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if hasattr(m, "init_head"):
            m.init_head()


class DepthModel(nn.Module):
    """Both branches, their uncertainty heads and the configured fusion.

    In the two-of-a-kind modes ("cnn+cnn", "transformer+transformer") the
    ``local``/``global_`` slots simply hold two branches of the same type.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        local_kind, global_kind = cfg.slot_kinds()
        self.local = build_branch(local_kind, cfg) if local_kind else None
        self.global_ = build_branch(global_kind, cfg) if global_kind else None
        head = lambda branch: UncertaintyHead(branch.feature_channels, cfg.sigma_min, cfg.sigma_init)
        self.local_uncertainty = head(self.local) if self.local else None
        self.global_uncertainty = head(self.global_) if self.global_ else None
        self.concat_conv = nn.Conv2d(2, 1, 3, padding=1) if cfg.mode == "concat" else None
        self.reset_parameters()

    def reset_parameters(self):
        init_weights(self)
        if self.concat_conv is not None:
            # start as the plain average of the two maps
            with torch.no_grad():
                self.concat_conv.weight.zero_()
                self.concat_conv.weight[0, :, 1, 1] = 0.5
                self.concat_conv.bias.zero_()

    @property
    def mode(self) -> str:
        return self.config.mode

    def forward(self, image) -> ModelOutput:
        size = image.shape[-2:]
        out = ModelOutput(depth_fused=None)
        if self.local is not None:
            out.depth_local, feats = self.local(image)
            out.sigma_local = self.local_uncertainty(feats, size)
        if self.global_ is not None:
            out.depth_global, feats = self.global_(image)
            out.sigma_global = self.global_uncertainty(feats, size)

        mode = self.mode
        if mode == "local-only":
            out.depth_fused = out.depth_local
        elif mode == "global-only":
            out.depth_fused = out.depth_global
        elif mode == "merge-equally":
            out.depth_fused = 0.5 * (out.depth_global + out.depth_local)
        elif mode == "concat":
            x = self.concat_conv(torch.cat([out.depth_global, out.depth_local], dim=1))
            out.depth_fused = torch.clamp(x, min=1e-6, max=self.config.d_max)
        else:
            fused, (wg, wl) = fuse(
                out.depth_global, out.depth_local,
                confidence(out.sigma_global), confidence(out.sigma_local),
            )
            out.depth_fused, out.w_global, out.w_local = fused, wg, wl
        return out


def model_forward(model: DepthModel, image, training: bool = False) -> ModelOutput:
    model.train(training)
    if training:
        return model(image)
    with torch.no_grad():
        return model(image)
