"""Integrated-gradients attribution over scalar model outputs.

Attribution of a differentiable scalar F to the entries of an input
window: gradients are averaged at the midpoints of m equal segments of
the straight line from the baseline to the input, then scaled by the
input-baseline difference. The midpoint rule makes the completeness gap
|sum(IG) - (F(x) - F(x'))| shrink quadratically on smooth targets, and
the gap is always recorded, never dropped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset_io import ScenarioDataset
from .errors import ConfigError, DataError, ShapeError
from .model import Model
from .tensor import Tensor
from .training import window_arrays

ScalarFn = Callable[[Tensor], Tensor]


@dataclass
class AttributionMap:
    target: str
    baseline_kind: str
    steps: int
    values: np.ndarray  # same shape as the input window
    completeness_gap: float


def _evaluate(f: ScalarFn, point: np.ndarray) -> float:
    out = f(Tensor(point))
    if out.size != 1:
        raise ShapeError(f"attribution target must be scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def integrated_gradients(
    f: ScalarFn,
    x: np.ndarray,
    baseline: np.ndarray,
    steps: int,
    target: str = "scalar",
    baseline_kind: str = "custom",
) -> AttributionMap:
    """Midpoint-rule integrated gradients of ``f`` from ``baseline`` to ``x``.

    ``f`` must build a scalar tensor from an input tensor of the same
    shape as ``x``. The m gradient evaluations are independent; they are
    summed in path order for determinism.
    """
    if steps < 2:
        raise ConfigError(f"integrated gradients needs at least 2 steps, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ShapeError(f"input and baseline shapes differ: {x.shape} vs {baseline.shape}")

    diff = x - baseline
    grad_sum = np.zeros_like(x)
    for k in range(1, steps + 1):
        alpha = (k - 0.5) / steps
        point = Tensor(baseline + alpha * diff, requires_grad=True)
        out = f(point)
        if out.size != 1:
            raise ShapeError(f"attribution target must be scalar, got shape {out.shape}")
        T.backward(out)
        grad_sum += point.grad
    values = diff * (grad_sum / steps)

    span = _evaluate(f, x) - _evaluate(f, baseline)
    gap = abs(float(values.sum()) - span)
    return AttributionMap(
        target=target, baseline_kind=baseline_kind, steps=steps, values=values, completeness_gap=gap
    )


def model_mean_target(model: Model, graph) -> ScalarFn:
    """Scalar target: the mean of the model's raw-scale prediction."""

    def f(window: Tensor) -> Tensor:
        batch = T.reshape(window, (1,) + window.shape)
        return T.reduce_mean(model.predict_tensor(batch, graph))

    return f


def model_entry_target(model: Model, graph, node: int, step: int = 0) -> ScalarFn:
    """Scalar target: one raw-scale output entry (node, horizon step)."""
    c = model.config
    if not 0 <= node < c.nodes:
        raise ConfigError(f"target node {node} out of range for {c.nodes} nodes")
    if not 0 <= step < c.horizon:
        raise ConfigError(f"target step {step} out of range for horizon {c.horizon}")
    indicator = np.zeros((1, c.horizon, c.nodes))
    indicator[0, step, node] = 1.0

    def f(window: Tensor) -> Tensor:
        batch = T.reshape(window, (1,) + window.shape)
        out = model.predict_tensor(batch, graph)
        return T.reduce_sum(T.mul(out, Tensor(indicator)))

    return f


@dataclass
class RoadImportance:
    values: np.ndarray  # (N,), normalized to [0, 1] by max
    target: str
    baseline_kind: str
    steps: int
    completeness_gap: float  # worst gap across sampled windows
    windows_used: int


def _baseline_window(model: Model, scenario: ScenarioDataset, kind: str, shape) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "mean":
        if model.norm_kind == "zscore":
            level = model.norm_mean
        else:
            level = float(np.nanmean(scenario.series))
        return np.full(shape, level)
    raise ConfigError(f"unknown attribution baseline {kind!r}; expected zeros or mean")


def road_importance(
    model: Model,
    scenario: ScenarioDataset,
    baseline_kind: str = "zeros",
    steps: int = 64,
    max_windows: int = 16,
) -> RoadImportance:
    """Mean |IG| per node over sampled windows, targeting the network mean.

    Windows are sampled at evenly spaced indices for determinism, and the
    result is scaled to [0, 1] by its maximum (all-zero if the model
    ignores its input entirely).
    """
    if scenario.series.size == 0:
        raise DataError(f"scenario {scenario.scenario_id!r} has no observations")
    xs, _ = window_arrays(scenario.series, model.config.history, model.config.horizon)
    if np.isnan(xs).any():
        raise DataError(f"scenario {scenario.scenario_id!r} has NaN inputs; attribution needs finite windows")
    picks = np.unique(np.linspace(0, len(xs) - 1, num=min(max_windows, len(xs))).round().astype(int))
    f = model_mean_target(model, scenario.graph)

    per_node = np.zeros(model.config.nodes)
    worst_gap = 0.0
    for w in picks:
        x = xs[w]
        base = _baseline_window(model, scenario, baseline_kind, x.shape)
        attribution = integrated_gradients(
            f, x, base, steps, target="network mean", baseline_kind=baseline_kind
        )
        per_node += np.abs(attribution.values).mean(axis=0)
        worst_gap = max(worst_gap, attribution.completeness_gap)
    per_node /= len(picks)
    top = per_node.max()
    if top > 0:
        per_node = per_node / top
    return RoadImportance(
        values=per_node,
        target="network mean",
        baseline_kind=baseline_kind,
        steps=steps,
        completeness_gap=worst_gap,
        windows_used=len(picks),
    )


def export_importance(result: RoadImportance, csv_path, sidecar_path) -> None:
    """importance CSV (node_id, importance) plus the JSON sidecar."""
    csv_path, sidecar_path = Path(csv_path), Path(sidecar_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "importance"])
        for i, v in enumerate(result.values):
            writer.writerow([i, "%.9g" % v])
    sidecar = {
        "target": result.target,
        "baseline_kind": result.baseline_kind,
        "m": result.steps,
        "completeness_gap": result.completeness_gap,
        "windows_used": result.windows_used,
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
