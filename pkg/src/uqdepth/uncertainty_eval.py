"""Sparsification / oracle curves for judging how well uncertainty ranks error.

Pixels are removed in descending order of a score (the predicted uncertainty
for the sparsification curve, the true error for the oracle curve) and the
RMSE of what remains is recorded at each removal fraction.
"""

from __future__ import annotations

import csv
import math
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_FRACTIONS = tuple(np.round(np.arange(0.0, 1.0, 0.02), 2).tolist())


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    rmse_values: np.ndarray

    def __post_init__(self):
        if len(self.fractions) != len(self.rmse_values):
            raise ValueError("fractions and rmse_values differ in length")


def _check_fractions(fractions) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("fractions must be a non-empty 1-D sequence")
    if np.any(f < 0) or np.any(f >= 1):
        raise ValueError("fractions must lie in [0, 1); f >= 1 leaves nothing to score")
    if f[0] != 0 or np.any(np.diff(f) <= 0):
        raise ValueError("fractions must start at 0 and be strictly increasing")
    return f


def _to_flat(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).ravel()


def sparsification_curve(errors, ranking, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> SparsificationCurve:
    """RMSE of the remaining pixels after dropping the top-``f`` ranked ones.

    Ties in ``ranking`` are broken by pixel index (lower index removed first).
    """
    err = _to_flat(errors)
    rank = _to_flat(ranking)
    if err.shape != rank.shape:
        raise ValueError(f"errors and ranking differ in shape: {err.shape} vs {rank.shape}")
    f = _check_fractions(fractions)
    n = err.size
    if n == 0:
        raise ValueError("empty error field")

    # primary key: descending score; secondary: ascending index
    order = np.lexsort((np.arange(n), -rank))
    sq = err[order] ** 2
    removed = np.floor(f * n).astype(np.int64)
    remaining = n - removed
    # correctly rounded sums keep the oracle curve monotone to the last ulp
    tail = np.array([math.fsum(sq[k:]) for k in removed])
    rmse = np.sqrt(tail / remaining)
    return SparsificationCurve(fractions=f, rmse_values=rmse)


def oracle_curve(errors, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> SparsificationCurve:
    err = _to_flat(errors)
    return sparsification_curve(np.abs(err), np.abs(err), fractions)


def sparsification_error(curve: SparsificationCurve, oracle: SparsificationCurve) -> tuple[np.ndarray, float]:
    """Pointwise curve-minus-oracle and its signed trapezoidal area over f."""
    if curve.fractions.shape != oracle.fractions.shape or not np.array_equal(curve.fractions, oracle.fractions):
        raise ValueError("curves were evaluated at different fractions")
    diff = curve.rmse_values - oracle.rmse_values
    f = curve.fractions
    area = float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(f))) if f.size > 1 else 0.0
    return diff, area


def average_curves(curves: Sequence[SparsificationCurve]) -> SparsificationCurve:
    """Per-image curves averaged into one dataset-level curve."""
    if not curves:
        raise ValueError("no curves to average")
    f = curves[0].fractions
    for c in curves[1:]:
        if not np.array_equal(c.fractions, f):
            raise ValueError("curves were evaluated at different fractions")
    return SparsificationCurve(f, np.mean([c.rmse_values for c in curves], axis=0))


def curves_to_csv(curve: SparsificationCurve, oracle: SparsificationCurve) -> str:
    diff, _ = sparsification_error(curve, oracle)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["fraction", "rmse_sparsification", "rmse_oracle", "difference"])
    for row in zip(curve.fractions, curve.rmse_values, oracle.rmse_values, diff):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def plot_curves(curve: SparsificationCurve, oracle: SparsificationCurve, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    diff, area = sparsification_error(curve, oracle)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.plot(curve.fractions, curve.rmse_values, label="sparsification")
    ax0.plot(oracle.fractions, oracle.rmse_values, "--", label="oracle")
    ax0.set_xlabel("fraction removed")
    ax0.set_ylabel("RMSE")
    ax0.legend()
    ax1.plot(curve.fractions, diff)
    ax1.axhline(0.0, color="k", lw=0.5)
    ax1.set_xlabel("fraction removed")
    ax1.set_title(f"sparsification error (area={area:.4f})")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
