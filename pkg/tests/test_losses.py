import math

import numpy as np
import pytest
import torch

from uqdepth.fusion import ModelOutput
from uqdepth.losses import LossWeights, branch_loss, depth_loss, edge_loss, gaussian_map_objective, map_loss, total_loss

t = lambda *v: torch.tensor(v, dtype=torch.float64)


def test_map_loss_examples():
    gt = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    one = torch.ones_like(gt)
    assert float(map_loss(gt, gt, one)) == 0.0
    pred = gt + torch.rand_like(gt)
    assert float(map_loss(pred, gt, one)) == pytest.approx(float((pred - gt).abs().mean()))
    assert float(map_loss(t(2.0), t(1.0), t(2.0), 0.1)) == pytest.approx(0.5 + 0.1 * math.log(2), abs=1e-12)


def test_map_loss_rejects_sigma_below_floor():
    with pytest.raises(ValueError):
        map_loss(t(1.0), t(1.0), t(1e-4))


def test_gaussian_objective_examples():
    assert float(gaussian_map_objective(t(1.0), t(1.0), t(1.0))) == 0.0
    assert float(gaussian_map_objective(t(2.0), t(1.0), t(1.0))) == pytest.approx(0.5)
    assert float(gaussian_map_objective(t(3.0), t(1.0), t(2.0))) == pytest.approx(2 * math.log(2) + 0.5, abs=1e-12)


def test_depth_loss_examples():
    gt = torch.rand(2, 1, 3, 3)
    assert float(depth_loss(gt, gt)) == 0.0
    assert float(depth_loss(gt + 0.5, gt)) == pytest.approx(0.5)
    assert float(depth_loss(t(1.0, 3.0), t(2.0, 1.0))) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        depth_loss(torch.zeros(2), torch.zeros(3))


def test_edge_loss_examples():
    gt = torch.rand(1, 1, 5, 6, dtype=torch.float64)
    assert float(edge_loss(gt, gt)) == 0.0
    assert float(edge_loss(gt + 0.37, gt)) == pytest.approx(0.0, abs=1e-12)
    row_gt = torch.tensor([[[[0.0, 1.0, 2.0]]]])
    assert float(edge_loss(torch.zeros_like(row_gt), row_gt)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        edge_loss(torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, 1))


def test_edge_loss_bruteforce():
    rng = np.random.default_rng(0)
    p, g = rng.random((4, 5)), rng.random((4, 5))
    r = g - p
    gx = [abs(r[i, j + 1] - r[i, j]) for i in range(4) for j in range(4)]
    gy = [abs(r[i + 1, j] - r[i, j]) for i in range(3) for j in range(5)]
    expected = sum(gx) / len(gx) + sum(gy) / len(gy)
    assert float(edge_loss(torch.tensor(p), torch.tensor(g))) == pytest.approx(expected, rel=1e-12)


def test_edge_zero_iff_constant_offset():
    g = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    p = g.clone()
    p[..., 2, 2] += 0.1
    assert float(edge_loss(p, g)) > 0


def _output(pred, gt_like, sigma=1.0):
    s = torch.full_like(gt_like, sigma)
    return ModelOutput(depth_fused=pred, depth_local=pred, depth_global=pred, sigma_local=s, sigma_global=s)


def test_total_loss():
    gt = torch.rand(2, 1, 4, 4) + 0.1
    total, terms = total_loss(_output(gt, gt), gt)
    assert float(total) == 0.0
    assert set(terms) == {"total", "map_global", "map_local", "depth", "edge"}
    pred = gt + torch.rand_like(gt)
    zero = LossWeights(0, 0, 0, 0, 0)
    assert float(total_loss(_output(pred, gt), gt, zero)[0]) == 0.0
    w = LossWeights()
    assert (w.lambda_global, w.lambda_local, w.lambda_depth, w.lambda_edge) == (0.1, 0.1, 1.0, 1.0)
    total, terms = total_loss(_output(pred, gt), gt, w)
    expected = 0.1 * terms["map_global"] + 0.1 * terms["map_local"] + terms["depth"] + terms["edge"]
    assert float(total) == pytest.approx(expected, rel=1e-6)


def test_total_loss_requires_both_branches():
    gt = torch.rand(1, 1, 4, 4) + 0.1
    with pytest.raises(ValueError, match="branch_loss"):
        total_loss(ModelOutput(depth_fused=gt, depth_local=gt, sigma_local=torch.ones_like(gt)), gt)
    loss, terms = branch_loss(gt, gt, torch.ones_like(gt), lambda_map=0.1)
    assert float(loss) == 0.0 and "map" in terms


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_depth=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_edge=float("inf"))


# --- gradient checks -------------------------------------------------------


def _fd(fn, x, h=1e-4):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def _fields(seed):
    gen = torch.Generator().manual_seed(seed)
    gt = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) + 0.1
    pred = gt + (torch.rand(gt.shape, generator=gen, dtype=torch.float64) - 0.5)
    sigma = torch.rand(gt.shape, generator=gen, dtype=torch.float64) + 0.1
    return pred, gt, sigma


def _rel_err(a, b):
    return float((a - b).abs().max() / b.abs().max().clamp(min=1e-12))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_map_loss_sigma_gradient(seed):
    pred, gt, sigma = _fields(seed)
    sigma.requires_grad_(True)
    map_loss(pred, gt, sigma, 0.1).backward()
    n = pred.numel()
    closed = (-(pred - gt).abs() / sigma**2 + 0.1 / sigma).detach() / n
    fd = _fd(lambda s: map_loss(pred, gt, s, 0.1), sigma.detach().clone())
    assert _rel_err(sigma.grad, closed) < 1e-10
    assert _rel_err(fd, closed) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_map_loss_pred_gradient(seed):
    pred, gt, sigma = _fields(seed)
    pred.requires_grad_(True)
    map_loss(pred, gt, sigma, 0.1).backward()
    n = pred.numel()
    closed = (torch.sign(pred - gt) / sigma).detach() / n
    mask = (pred - gt).abs().detach() >= 1e-3
    fd = _fd(lambda p: map_loss(p, gt, sigma, 0.1), pred.detach().clone())
    assert _rel_err(pred.grad[mask], closed[mask]) < 1e-10
    assert _rel_err(fd[mask], closed[mask]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_gaussian_objective_gradients(seed):
    pred, gt, sigma = _fields(seed)
    pred.requires_grad_(True)
    sigma.requires_grad_(True)
    gaussian_map_objective(pred, gt, sigma).backward()
    n = pred.numel()
    r = (pred - gt).detach()
    s = sigma.detach()
    closed_pred = r / s**2 / n
    closed_sigma = (2 / s - r**2 / s**3) / n
    assert _rel_err(pred.grad, closed_pred) < 1e-10
    assert _rel_err(sigma.grad, closed_sigma) < 1e-10
    assert _rel_err(_fd(lambda p: gaussian_map_objective(p, gt, s), pred.detach().clone()), closed_pred) < 1e-4
    assert _rel_err(_fd(lambda q: gaussian_map_objective(pred.detach(), gt, q), s.clone()), closed_sigma) < 1e-4


def test_map_loss_optimal_sigma_by_grid_search():
    pred, gt = t(1.7), t(1.0)
    grid = torch.linspace(0.01, 20.0, 200001, dtype=torch.float64)
    losses = (pred - gt).abs() / grid + 0.1 * torch.log(grid)
    best = float(grid[torch.argmin(losses)])
    assert best == pytest.approx(0.7 / 0.1, abs=1e-3)


def test_tie_subgradient_is_zero():
    p = t(1.0).requires_grad_(True)
    depth_loss(p, t(1.0)).backward()
    assert float(p.grad) == 0.0
