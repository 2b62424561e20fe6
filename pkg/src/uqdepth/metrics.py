"""Median scaling and the nine Eigen-style depth metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

METRIC_NAMES = (
    "delta1",
    "delta2",
    "delta3",
    "abs_rel",
    "sq_rel",
    "rmse",
    "rmse_log",
    "log10",
    "silog",
)


@dataclass(frozen=True)
class MetricReport:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    silog: float
    n_pixels: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    def to_csv_row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    @staticmethod
    def csv_header() -> list[str]:
        return [f.name for f in fields(MetricReport)]


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def median_scale(pred, gt) -> tuple[np.ndarray, float]:
    """Scale ``pred`` by median(gt) / median(pred)."""
    pred = _as_array(pred)
    gt = _as_array(gt)
    med_pred = float(np.median(pred))
    med_gt = float(np.median(gt))
    if not (med_pred > 0 and med_gt > 0):
        raise ValueError(f"non-positive median (pred={med_pred}, gt={med_gt})")
    scale = med_gt / med_pred
    return pred * scale, scale


def compute_metrics(pred, gt, apply_median_scaling: bool = True) -> MetricReport:
    pred = _as_array(pred)
    gt = _as_array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty depth maps")
    if not (np.all(pred > 0) and np.all(gt > 0)):
        raise ValueError("depth values must be strictly positive (logs undefined)")
    if apply_median_scaling:
        pred, _ = median_scale(pred, gt)

    pred = pred.ravel()
    gt = gt.ravel()
    thresh = np.maximum(pred / gt, gt / pred)
    diff = pred - gt
    log_diff = np.log(pred) - np.log(gt)

    silog_var = np.var(log_diff)  # two-pass; avoids cancellation
    return MetricReport(
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff**2 / gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(log_diff**2))),
        log10=float(np.mean(np.abs(np.log10(pred) - np.log10(gt)))),
        silog=float(100.0 * np.sqrt(silog_var)),
        n_pixels=int(pred.size),
    )


def aggregate(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) standard deviation of every metric."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(vals.mean()), float(vals.std()))
    return out


def format_mean_std(summary: dict[str, tuple[float, float]], digits: int = 3) -> dict[str, str]:
    return {k: f"{m:.{digits}f}±{s:.{digits}f}" for k, (m, s) in summary.items()}


def reports_to_csv(reports: Iterable[MetricReport], ids: Iterable[str] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    reports = list(reports)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(reports))]
    writer.writerow(["id"] + MetricReport.csv_header())
    for rid, rep in zip(ids, reports):
        writer.writerow([rid] + rep.to_csv_row())
    return buf.getvalue()


def summary_to_csv(summary: dict[str, tuple[float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "mean", "std", "mean_pm_std"])
    pretty = format_mean_std(summary)
    for name, (m, s) in summary.items():
        writer.writerow([name, m, s, pretty[name]])
    return buf.getvalue()
