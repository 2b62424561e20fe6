# How per-pixel uncertainty turns into fusion weights.

import torch

from uqdepth.fusion import confidence, fuse
from uqdepth.losses import map_loss

sigma = torch.tensor([0.0, 0.001, 0.1, 0.5, 1.0, 3.0, 10.0], dtype=torch.float64)
for s, c in zip(sigma.tolist(), confidence(sigma).tolist()):
    print(f"sigma {s:6.3f}  confidence {c:.6f}")

# the softmax over two confidences can only move the weights a little away from 1/2
d_global = torch.full((1, 1, 1, 5), 0.40, dtype=torch.float64)
d_local = torch.full((1, 1, 1, 5), 0.60, dtype=torch.float64)
s_global = torch.tensor([[[[0.0, 0.2, 1.0, 2.0, 8.0]]]], dtype=torch.float64)
s_local = torch.flip(s_global, dims=[-1])
fused, (w_g, w_l) = fuse(d_global, d_local, confidence(s_global), confidence(s_local))
print("w_global", [round(x, 4) for x in w_g.flatten().tolist()])
print("fused   ", [round(x, 4) for x in fused.flatten().tolist()])

# the uncertainty term is minimised at sigma = |error| / lambda_b
err = 0.05
grid = torch.linspace(0.05, 2.0, 400, dtype=torch.float64)
losses = torch.stack([map_loss(torch.tensor(err), torch.tensor(0.0), g, 0.1) for g in grid])
print("best sigma on grid:", round(float(grid[losses.argmin()]), 3), "expected", err / 0.1)
