"""Canonical on-disk corpus layout and the validated load/write paths.

Layout::

    corpus_dir/
      manifest.json          scenario index, interval, variable name
      graphs/<id>.json       {"num_nodes", "edges": [[src, dst, weight]...],
                              "static_features": [[...]...]}
      series/<id>.csv        header node_0..node_{N-1}, one row per step,
                              cells are decimal reals or the literal NaN

Serialization is deterministic: fixed key order, floats rendered with 9
significant digits, so writing twice yields byte-identical files and
write -> load -> write is a fixed point. NaN cells survive the round trip
(they feed the metric mask).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import TrafficGraph

FORMAT_VERSION = 1


def format_float(x: float) -> str:
    """9-significant-digit decimal text; NaN spelled literally."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    return "%.9g" % x


def quantize(x: float) -> float:
    """Snap a value to its 9-significant-digit decimal representation."""
    x = float(x)
    if math.isnan(x):
        return x
    return float("%.9g" % x)


@dataclass
class ScenarioDataset:
    """One scenario: its topology and its node-by-time observations."""

    scenario_id: str
    graph: TrafficGraph
    series: np.ndarray  # (T, N), may contain NaN
    interval_minutes: float
    removed_edges: list[tuple[int, int]] = field(default_factory=list)
    split_hint: str | None = None

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise DataError(f"scenario {self.scenario_id!r}: series must be (T, N), got {self.series.shape}")
        if self.series.shape[1] != self.graph.num_nodes:
            raise DataError(
                f"scenario {self.scenario_id!r}: series has {self.series.shape[1]} columns "
                f"but the graph has {self.graph.num_nodes} nodes"
            )
        self.removed_edges = [(int(s), int(d)) for s, d in self.removed_edges]


@dataclass
class GeneratedCorpus:
    """A set of scenarios over a shared node set, plus provenance."""

    scenarios: list[ScenarioDataset]
    interval_minutes: float
    variable_name: str = "flow"
    bridge_edges: list[tuple[int, int]] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        seen = set()
        for scen in self.scenarios:
            if scen.scenario_id in seen:
                raise DataError(f"duplicate scenario id {scen.scenario_id!r}")
            seen.add(scen.scenario_id)
        counts = {s.graph.num_nodes for s in self.scenarios}
        if len(counts) > 1:
            raise DataError(f"scenarios must share one node set; found node counts {sorted(counts)}")
        self.bridge_edges = [(int(s), int(d)) for s, d in self.bridge_edges]

    def scenario(self, scenario_id: str) -> ScenarioDataset:
        for scen in self.scenarios:
            if scen.scenario_id == scenario_id:
                return scen
        raise DataError(f"no scenario {scenario_id!r} in corpus")

    @property
    def num_nodes(self) -> int:
        return self.scenarios[0].graph.num_nodes if self.scenarios else 0


# ---------------------------------------------------------------------------
# writing


def _graph_payload(graph: TrafficGraph) -> dict:
    return {
        "num_nodes": graph.num_nodes,
        "edges": [[s, d, quantize(w)] for s, d, w in graph.edges],
        "static_features": [[quantize(v) for v in row] for row in graph.static_features],
    }


def write_corpus(corpus: GeneratedCorpus, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for scen in corpus.scenarios:
        graph_file = f"graphs/{scen.scenario_id}.json"
        series_file = f"series/{scen.scenario_id}.csv"
        entries.append(
            {
                "id": scen.scenario_id,
                "graph_file": graph_file,
                "series_file": series_file,
                "removed_edges": [[s, d] for s, d in scen.removed_edges],
                "split_hint": scen.split_hint,
            }
        )
    manifest = {
        "version": corpus.version,
        "interval_minutes": corpus.interval_minutes,
        "variable_name": corpus.variable_name,
        "bridge_edges": [[s, d] for s, d in corpus.bridge_edges],
        "scenarios": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    if corpus.scenarios:
        (root / "graphs").mkdir(exist_ok=True)
        (root / "series").mkdir(exist_ok=True)
    for scen in corpus.scenarios:
        payload = json.dumps(_graph_payload(scen.graph), indent=2) + "\n"
        (root / "graphs" / f"{scen.scenario_id}.json").write_text(payload, encoding="utf-8")
        n = scen.graph.num_nodes
        lines = [",".join(f"node_{i}" for i in range(n))]
        for row in scen.series:
            lines.append(",".join(format_float(v) for v in row))
        (root / "series" / f"{scen.scenario_id}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# loading


def _load_json(path: Path) -> dict:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def load_graph_file(path) -> TrafficGraph:
    path = Path(path)
    payload = _load_json(path)
    for key in ("num_nodes", "edges", "static_features"):
        if key not in payload:
            raise DataError(f"{path}: graph file is missing {key!r}")
    edges = [(int(e[0]), int(e[1]), float(e[2])) for e in payload["edges"]]
    try:
        return TrafficGraph(int(payload["num_nodes"]), edges, np.asarray(payload["static_features"], dtype=np.float64))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_series_csv(path: Path, num_nodes: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln != ""]
    if not lines:
        raise DataError(f"{path}: empty series file")
    header = lines[0].split(",")
    expected = [f"node_{i}" for i in range(num_nodes)]
    if header != expected:
        raise DataError(f"{path} line 1: header does not match node_0..node_{num_nodes - 1}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != num_nodes:
            raise DataError(f"{path} line {lineno}: expected {num_nodes} cells, found {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataError(f"{path} line {lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64)


def load_corpus(path) -> GeneratedCorpus:
    root = Path(path)
    manifest = _load_json(root / "manifest.json")
    for key in ("version", "interval_minutes", "variable_name", "scenarios"):
        if key not in manifest:
            raise DataError(f"{root / 'manifest.json'}: missing {key!r}")
    scenarios = []
    seen = set()
    for entry in manifest["scenarios"]:
        sid = entry.get("id")
        if not sid:
            raise DataError(f"{root / 'manifest.json'}: scenario entry without an id")
        if sid in seen:
            raise DataError(f"{root / 'manifest.json'}: duplicate scenario id {sid!r}")
        seen.add(sid)
        graph = load_graph_file(root / entry["graph_file"])
        series = _load_series_csv(root / entry["series_file"], graph.num_nodes)
        scenarios.append(
            ScenarioDataset(
                scenario_id=sid,
                graph=graph,
                series=series,
                interval_minutes=float(manifest["interval_minutes"]),
                removed_edges=[(int(s), int(d)) for s, d in entry.get("removed_edges", [])],
                split_hint=entry.get("split_hint"),
            )
        )
    return GeneratedCorpus(
        scenarios=scenarios,
        interval_minutes=float(manifest["interval_minutes"]),
        variable_name=str(manifest["variable_name"]),
        bridge_edges=[(int(s), int(d)) for s, d in manifest.get("bridge_edges", [])],
        version=int(manifest["version"]),
    )
