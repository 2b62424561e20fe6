# Sparsification curves: an informative ranking against a random one.

from pathlib import Path

import numpy as np

from uqdepth.uncertainty_eval import oracle_curve, plot_curves, sparsification_curve, sparsification_error

rng = np.random.default_rng(3)
noise_scale = rng.uniform(0.01, 0.2, (64, 64))
errors = np.abs(rng.normal(0, noise_scale))

oracle = oracle_curve(errors)
for name, ranking in [("noise scale", noise_scale), ("random", rng.random((64, 64)))]:
    curve = sparsification_curve(errors, ranking)
    _, area = sparsification_error(curve, oracle)
    print(f"{name:12s} area above oracle {area:.5f}  rmse at 50% removed {curve.rmse_values[25]:.4f}")

print(f"oracle       rmse at 50% removed {oracle.rmse_values[25]:.4f}")

out = Path("sparsification_demo.png")
plot_curves(sparsification_curve(errors, noise_scale), oracle, out, title="noise-scale ranking")
print("wrote", out)
