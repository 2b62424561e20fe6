"""Training objectives: per-branch MAP loss, L1 depth, edge, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fusion import ModelOutput, SIGMA_MIN


@dataclass
class LossWeights:
    lambda_global: float = 0.1
    lambda_local: float = 0.1
    lambda_depth: float = 1.0
    lambda_edge: float = 1.0
    lambda_b_reg: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{k}={v} must be finite and non-negative")


def _check_shapes(*ts):
    shapes = {tuple(t.shape) for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _check_sigma(sigma, sigma_min):
    if torch.any(sigma < sigma_min):
        raise ValueError(f"sigma below floor {sigma_min}")


def map_loss(pred, gt, sigma, lambda_b: float = 0.1, sigma_min: float = SIGMA_MIN):
    """mean(|pred - gt| / sigma + lambda_b * ln(sigma))."""
    _check_shapes(pred, gt, sigma)
    _check_sigma(sigma, sigma_min)
    return torch.mean(torch.abs(pred - gt) / sigma + lambda_b * torch.log(sigma))


def gaussian_map_objective(pred, gt, sigma, sigma_min: float = SIGMA_MIN):
    """mean(2 ln(sigma) + (pred - gt)^2 / (2 sigma^2)); analysis only."""
    _check_shapes(pred, gt, sigma)
    _check_sigma(sigma, sigma_min)
    return torch.mean(2.0 * torch.log(sigma) + (pred - gt) ** 2 / (2.0 * sigma**2))


def depth_loss(pred, gt):
    _check_shapes(pred, gt)
    return torch.mean(torch.abs(pred - gt))


def edge_loss(pred, gt):
    """Forward differences of (gt - pred) along x and y, |gx| + |gy| averaged
    over the positions where each difference exists."""
    _check_shapes(pred, gt)
    if pred.shape[-1] < 2 and pred.shape[-2] < 2:
        raise ValueError("edge loss needs at least 2 pixels along x or y")
    r = gt - pred
    total = 0.0
    if r.shape[-1] >= 2:
        total = total + torch.mean(torch.abs(r[..., :, 1:] - r[..., :, :-1]))
    if r.shape[-2] >= 2:
        total = total + torch.mean(torch.abs(r[..., 1:, :] - r[..., :-1, :]))
    return total


def total_loss(output: ModelOutput, gt, w: LossWeights = LossWeights()):
    """Weighted sum of both MAP losses, L1 depth and edge loss on the fused map.

    Returns ``(total, terms)`` where ``terms`` maps names to detached floats.
    """
    missing = output.missing()
    if missing:
        raise ValueError(
            f"output lacks {missing}; single-branch outputs should use branch_loss instead"
        )
    terms = {
        "map_global": map_loss(output.depth_global, gt, output.sigma_global, w.lambda_b_reg),
        "map_local": map_loss(output.depth_local, gt, output.sigma_local, w.lambda_b_reg),
        "depth": depth_loss(output.depth_fused, gt),
        "edge": edge_loss(output.depth_fused, gt),
    }
    total = (
        w.lambda_global * terms["map_global"]
        + w.lambda_local * terms["map_local"]
        + w.lambda_depth * terms["depth"]
        + w.lambda_edge * terms["edge"]
    )
    return total, {"total": float(total.detach())} | {k: float(v.detach()) for k, v in terms.items()}


def branch_loss(pred, gt, sigma=None, w: LossWeights = LossWeights(), lambda_map: float = 0.0):
    """Single-branch objective: depth + edge, plus an optional MAP term."""
    terms = {"depth": depth_loss(pred, gt), "edge": edge_loss(pred, gt)}
    total = w.lambda_depth * terms["depth"] + w.lambda_edge * terms["edge"]
    if sigma is not None and lambda_map > 0:
        terms["map"] = map_loss(pred, gt, sigma, w.lambda_b_reg)
        total = total + lambda_map * terms["map"]
    return total, {"total": float(total.detach())} | {k: float(v.detach()) for k, v in terms.items()}
