# Depth error metrics on a toy prediction, with and without median scaling.

import numpy as np

from uqdepth import compute_metrics, generate_toy_colon
from uqdepth.metrics import aggregate, format_mean_std

samples = generate_toy_colon(8, 64, seed=1)
rng = np.random.default_rng(0)

reports = []
for s in samples:
    gt = s.depth[0]
    # a prediction that is right up to a global scale, plus a little noise
    pred = 0.37 * gt * np.exp(rng.normal(0, 0.05, gt.shape))
    raw = compute_metrics(pred, gt, apply_median_scaling=False)
    scaled = compute_metrics(pred, gt)
    reports.append(scaled)
    print(f"{s.source_id}: abs_rel raw {raw.abs_rel:.3f} -> scaled {scaled.abs_rel:.3f}, "
          f"delta1 {raw.delta1:.3f} -> {scaled.delta1:.3f}")

# silog ignores global scale, so it does not move
print("silog (scaled):", round(reports[0].silog, 4))

for name, text in format_mean_std(aggregate(reports)).items():
    print(f"{name:>9s}  {text}")
