"""Masked forecast error metrics.

RMSE and MAE are computed over entries whose ground truth is not NaN.
MAPE is additionally restricted to entries with |truth| >= epsilon
(epsilon = 1e-5) and reported in percent; when that index set is empty
the MAPE is absent rather than zero, since zero would falsely signal a
perfect forecast on all-zero truths. Metrics are always evaluated on
raw (denormalized) values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

MAPE_EPSILON = 1e-5


@dataclass
class MetricReport:
    rmse: float
    mae: float
    mape_percent: float | None
    masked_count: int
    total_count: int
    per_node: dict[str, list] | None = None

    def to_dict(self) -> dict:
        out = {
            "rmse": self.rmse,
            "mae": self.mae,
            "mape_percent": self.mape_percent,
            "masked_count": self.masked_count,
            "total_count": self.total_count,
        }
        if self.per_node is not None:
            out["per_node"] = self.per_node
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def masked_metrics(pred, truth, epsilon: float = MAPE_EPSILON) -> MetricReport:
    """Masked RMSE / MAE / MAPE over flat prediction and truth arrays.

    NaN truths are excluded from every metric; MAPE uses only entries
    with |truth| >= epsilon among the survivors.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"prediction/truth lengths differ: {p.shape} vs {y.shape}")
    if not np.isfinite(p).all():
        raise ValueError("predictions must be finite")

    valid = ~np.isnan(y)
    total = int(y.size)
    masked = int(total - valid.sum())
    pv, yv = p[valid], y[valid]

    if pv.size == 0:
        rmse, mae = 0.0, 0.0
    else:
        diff = pv - yv
        rmse = float(math.sqrt(np.mean(diff * diff)))
        mae = float(np.mean(np.abs(diff)))

    sig = np.abs(yv) >= epsilon
    if sig.any():
        mape = float(100.0 * np.mean(np.abs((yv[sig] - pv[sig]) / yv[sig])))
    else:
        mape = None
    return MetricReport(rmse=rmse, mae=mae, mape_percent=mape, masked_count=masked, total_count=total)


def per_node_metrics(pred, truth, epsilon: float = MAPE_EPSILON) -> list[MetricReport]:
    """Independent masked metrics per node over all batch/horizon entries.

    Inputs are (..., N): everything but the trailing node axis is pooled.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"prediction/truth shapes differ: {p.shape} vs {y.shape}")
    n = p.shape[-1]
    p2 = p.reshape(-1, n)
    y2 = y.reshape(-1, n)
    return [masked_metrics(p2[:, i], y2[:, i], epsilon) for i in range(n)]


def report_with_per_node(pred, truth, epsilon: float = MAPE_EPSILON) -> MetricReport:
    """Aggregate report carrying parallel per-node metric vectors."""
    agg = masked_metrics(pred, truth, epsilon)
    nodes = per_node_metrics(pred, truth, epsilon)
    agg.per_node = {
        "rmse": [r.rmse for r in nodes],
        "mae": [r.mae for r in nodes],
        "mape_percent": [r.mape_percent for r in nodes],
        "masked_count": [r.masked_count for r in nodes],
    }
    return agg
