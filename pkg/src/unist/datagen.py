"""Synthetic scenario-topology traffic generator.

Desk-scale stand-in for a simulator-derived corpus: a clustered random
geometric road network with a few long bridge edges, periodic
origin-destination demand routed along shortest paths, per-node capacity
caps (the nonlinearity that makes static features informative), Gaussian
observation noise, and per-scenario edge removals. Scenarios share the
node set; their edge sets differ, and train/test removal sets are forced
to be distinct so the split tests structural generalization.

Every stream of randomness is derived from (seed, purpose, scenario), so
regenerating a corpus from the same spec is byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .dataset_io import GeneratedCorpus, ScenarioDataset, quantize, write_corpus
from .errors import ConfigError, DataError
from .graph import TrafficGraph

_UNREACHABLE = -9999  # scipy's predecessor sentinel


@dataclass
class SyntheticSpec:
    num_nodes: int = 24
    edge_density: float = 0.15
    num_clusters: int = 3
    num_bridges: int = 3
    num_scenarios: int = 6
    num_train: int = 4
    removals_per_scenario: list | None = None  # per scenario: count or [[src, dst], ...]
    steps: int = 168
    interval_minutes: float = 5.0
    demand_period: int = 42
    demand_scale: float = 1.0
    num_od_pairs: int = 8
    noise_std: float = 0.4
    capacity_scale: float | None = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.removals_per_scenario is None:
            self.removals_per_scenario = [0] + [2] * (self.num_scenarios - 1)

    def validate(self) -> None:
        if int(self.num_nodes) < 1:
            raise ConfigError(f"num_nodes must be >= 1, got {self.num_nodes}")
        if int(self.steps) < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if int(self.num_scenarios) < 1:
            raise ConfigError(f"num_scenarios must be >= 1, got {self.num_scenarios}")
        if not 0 < int(self.num_train) <= int(self.num_scenarios):
            raise ConfigError(
                f"num_train must be in [1, num_scenarios={self.num_scenarios}], got {self.num_train}"
            )
        if not 0.0 < float(self.edge_density) <= 1.0:
            raise ConfigError(f"edge_density must be in (0, 1], got {self.edge_density}")
        if int(self.num_clusters) < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if int(self.demand_period) < 2:
            raise ConfigError(f"demand_period must be >= 2, got {self.demand_period}")
        if float(self.noise_std) < 0:
            raise ConfigError(f"noise_std must be nonnegative, got {self.noise_std}")
        if float(self.demand_scale) < 0:
            raise ConfigError(f"demand_scale must be nonnegative, got {self.demand_scale}")
        if len(self.removals_per_scenario) != int(self.num_scenarios):
            raise ConfigError(
                f"removals_per_scenario needs one entry per scenario "
                f"({self.num_scenarios}), got {len(self.removals_per_scenario)}"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown generator spec field(s): {sorted(extra)}")
        spec = cls(**raw)
        spec.validate()
        return spec


@dataclass
class ODPair:
    origin: int
    dest: int
    amplitude: float
    phase: float


@dataclass
class NetworkPlan:
    """A generated base network plus the layout metadata demand needs."""

    graph: TrafficGraph
    positions: np.ndarray  # (N, 2)
    clusters: np.ndarray  # (N,), cluster index per node
    bridges: list[tuple[int, int]] = field(default_factory=list)


def generate_network(spec: SyntheticSpec) -> NetworkPlan:
    """Clustered random geometric digraph with long bridge edges.

    Nodes sit in Gaussian blobs around cluster centers; each node links
    (both directions) to its nearest neighbours with euclidean-distance
    weights; the few globally closest cross-cluster pairs become bridges.
    Static features are capacity in [1, 4] and a lane count in {1, 2, 3}.
    """
    spec.validate()
    rng = np.random.default_rng([int(spec.seed), 100])
    n = int(spec.num_nodes)
    n_clusters = min(int(spec.num_clusters), n)

    angles = 2 * np.pi * np.arange(n_clusters) / n_clusters
    centers = 0.5 + 0.35 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    clusters = np.arange(n) % n_clusters
    positions = centers[clusters] + rng.normal(0.0, 0.12, size=(n, 2))
    positions = np.array([[quantize(v) for v in row] for row in positions])

    dist = np.sqrt(((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2))
    k = max(1, int(round(float(spec.edge_density) * (n - 1))))
    edge_set: dict[tuple[int, int], float] = {}
    for i in range(n):
        order = np.argsort(dist[i])
        neighbours = [j for j in order if j != i][:k]
        for j in neighbours:
            w = quantize(dist[i, j])
            edge_set.setdefault((i, int(j)), w)
            edge_set.setdefault((int(j), i), w)

    bridges: list[tuple[int, int]] = []
    if n_clusters > 1 and int(spec.num_bridges) > 0:
        pair_cycle = list(combinations(range(n_clusters), 2))
        cross: dict[tuple[int, int], list[tuple[float, int, int]]] = {p: [] for p in pair_cycle}
        for i in range(n):
            for j in range(n):
                if i == j or clusters[i] == clusters[j]:
                    continue
                key = (min(clusters[i], clusters[j]), max(clusters[i], clusters[j]))
                if i < j:
                    cross[key].append((dist[i, j], i, j))
        for lst in cross.values():
            lst.sort()
        used: dict[tuple[int, int], int] = {p: 0 for p in pair_cycle}
        for b in range(int(spec.num_bridges)):
            key = pair_cycle[b % len(pair_cycle)]
            candidates = cross[key]
            while used[key] < len(candidates):
                d, i, j = candidates[used[key]]
                used[key] += 1
                if (i, j) not in edge_set:
                    w = quantize(d)
                    edge_set[(i, j)] = w
                    edge_set[(j, i)] = w
                    bridges.append((i, j))
                    break

    capacity = np.array([quantize(v) for v in rng.uniform(1.0, 4.0, size=n)])
    lanes = rng.integers(1, 4, size=n).astype(np.float64)
    features = np.stack([capacity, lanes], axis=1)

    edges = [(s, d, w) for (s, d), w in sorted(edge_set.items())]
    graph = TrafficGraph(n, edges, features)

    if n > 1:
        sym = csr_matrix((graph.adjacency + graph.adjacency.T) > 0)
        n_comp, _ = connected_components(sym, directed=False)
        if n_comp > 1:
            raise DataError(
                f"generated network is disconnected ({n_comp} components); "
                "raise edge_density or num_bridges"
            )
    return NetworkPlan(graph=graph, positions=positions, clusters=clusters, bridges=bridges)


def default_od_pairs(plan: NetworkPlan, spec: SyntheticSpec, rng: np.random.Generator) -> list[ODPair]:
    """Cross-cluster OD demand with a phase shared per origin cluster."""
    if spec.demand_scale == 0 or spec.num_od_pairs == 0:
        return []
    n_clusters = int(plan.clusters.max()) + 1
    members = [np.flatnonzero(plan.clusters == c) for c in range(n_clusters)]
    pairs = []
    for p in range(int(spec.num_od_pairs)):
        c_from = p % n_clusters
        c_to = (p + 1) % n_clusters
        origin = int(rng.choice(members[c_from]))
        dest = int(rng.choice(members[c_to]))
        if dest == origin:
            others = [i for i in range(plan.graph.num_nodes) if i != origin]
            if not others:
                continue
            dest = int(rng.choice(others))
        amplitude = float(spec.demand_scale) * float(rng.uniform(0.5, 1.5))
        phase = 2 * np.pi * c_from / n_clusters
        pairs.append(ODPair(origin=origin, dest=dest, amplitude=amplitude, phase=phase))
    return pairs


def _shortest_paths(graph: TrafficGraph, od_pairs: list[ODPair]) -> dict[tuple[int, int], list[int]]:
    """Node sequences of the shortest route per OD pair; unreachable pairs vanish."""
    wanted = sorted({(od.origin, od.dest) for od in od_pairs})
    if not wanted:
        return {}
    origins = sorted({o for o, _ in wanted})
    matrix = csr_matrix(graph.adjacency)
    _, predecessors = dijkstra(matrix, directed=True, indices=origins, return_predecessors=True)
    row = {o: i for i, o in enumerate(origins)}
    paths: dict[tuple[int, int], list[int]] = {}
    for origin, dest in wanted:
        if origin == dest:
            paths[(origin, dest)] = [origin]
            continue
        pred = predecessors[row[origin]]
        if pred[dest] == _UNREACHABLE:
            continue
        node, trail = dest, [dest]
        while node != origin:
            node = int(pred[node])
            trail.append(node)
        paths[(origin, dest)] = trail[::-1]
    return paths


def simulate_flows(
    graph: TrafficGraph,
    spec: SyntheticSpec,
    scenario_removals: list[tuple[int, int]],
    od_pairs: list[ODPair] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """(T, N) per-node throughput under the scenario's disrupted topology.

    Demand follows a sinusoidal profile with the OD pair's phase, routed
    along the shortest remaining path; every node on the route accrues the
    demand. Flows are capped by node capacity (if capacity_scale is set),
    perturbed with Gaussian noise, clamped at zero, and quantized to the
    corpus float-text precision. Unreachable demand simply vanishes, so
    degenerate graphs yield zero flows, never NaN.
    """
    spec.validate()
    existing = {(s, d) for s, d, _ in graph.edges}
    for s, d in scenario_removals:
        if (int(s), int(d)) not in existing:
            raise DataError(f"removal ({s}, {d}) is not an edge of the base graph")
    if rng is None:
        rng = np.random.default_rng([int(spec.seed), 400])
    if od_pairs is None:
        od_pairs = default_od_pairs(
            NetworkPlan(graph, np.zeros((graph.num_nodes, 2)), np.zeros(graph.num_nodes, dtype=int)),
            spec,
            np.random.default_rng([int(spec.seed), 200]),
        )

    remaining = graph.without_edges(scenario_removals)
    paths = _shortest_paths(remaining, od_pairs)

    t_axis = np.arange(int(spec.steps))
    flows = np.zeros((int(spec.steps), graph.num_nodes))
    for od in od_pairs:
        path = paths.get((od.origin, od.dest))
        if path is None:
            continue
        profile = od.amplitude * 0.5 * (1.0 + np.sin(2 * np.pi * t_axis / int(spec.demand_period) + od.phase))
        for node in path:
            flows[:, node] += profile

    if spec.capacity_scale is not None:
        caps = graph.static_features[:, 0] * float(spec.capacity_scale)
        flows = np.minimum(flows, caps[None, :])
    if spec.noise_std > 0:
        flows = flows + rng.normal(0.0, float(spec.noise_std), size=flows.shape)
    flows = np.maximum(flows, 0.0)
    return np.array([[quantize(v) for v in row] for row in flows])


def _resolve_removals(
    spec: SyntheticSpec, plan: NetworkPlan, index: int, taken: list[frozenset]
) -> list[tuple[int, int]]:
    entry = spec.removals_per_scenario[index]
    edges = [(s, d) for s, d, _ in plan.graph.edges]
    if isinstance(entry, int):
        count = entry
        if count < 0 or count > len(edges):
            raise ConfigError(
                f"removals_per_scenario[{index}] asks for {count} removals "
                f"from {len(edges)} edges"
            )
        if count == 0:
            return []
        rng = np.random.default_rng([int(spec.seed), 300, index])
        for _ in range(64):
            picked = [edges[i] for i in rng.choice(len(edges), size=count, replace=False)]
            if frozenset(picked) not in taken:
                return sorted(picked)
        raise ConfigError(
            f"could not draw a distinct removal set for scenario {index}; "
            "too few edges for the requested scenario diversity"
        )
    removals = [(int(s), int(d)) for s, d in entry]
    for s, d in removals:
        if (s, d) not in set(edges):
            raise ConfigError(f"removals_per_scenario[{index}]: ({s}, {d}) is not a base edge")
    return sorted(set(removals))


def generate_corpus(spec: SyntheticSpec, out_dir=None) -> GeneratedCorpus:
    """Build the scenario corpus; optionally write it in the corpus layout.

    Scenario ids are train_0..train_{k-1} then test_0..; train and test
    removal sets must differ, otherwise the held-out scenarios would not
    probe structural generalization.
    """
    spec.validate()
    plan = generate_network(spec)
    od_pairs = default_od_pairs(plan, spec, np.random.default_rng([int(spec.seed), 200]))

    n_train = int(spec.num_train)
    ids = [f"train_{i}" for i in range(n_train)] + [
        f"test_{i}" for i in range(int(spec.num_scenarios) - n_train)
    ]

    removal_sets: list[list[tuple[int, int]]] = []
    taken: list[frozenset] = []
    for index in range(int(spec.num_scenarios)):
        removals = _resolve_removals(spec, plan, index, taken)
        removal_sets.append(removals)
        if removals:
            taken.append(frozenset(removals))

    for i in range(n_train):
        for j in range(n_train, int(spec.num_scenarios)):
            if removal_sets[i] == removal_sets[j]:
                raise ConfigError(
                    f"scenario {ids[i]} and held-out scenario {ids[j]} share the removal set "
                    f"{removal_sets[i]}; the split must test structural generalization"
                )

    scenarios = []
    for index, sid in enumerate(ids):
        removals = removal_sets[index]
        scenario_graph = plan.graph.without_edges(removals)
        series = simulate_flows(
            plan.graph,
            spec,
            removals,
            od_pairs=od_pairs,
            rng=np.random.default_rng([int(spec.seed), 400, index]),
        )
        scenarios.append(
            ScenarioDataset(
                scenario_id=sid,
                graph=scenario_graph,
                series=series,
                interval_minutes=float(spec.interval_minutes),
                removed_edges=removals,
                split_hint="train" if index < n_train else "test",
            )
        )
    corpus = GeneratedCorpus(
        scenarios=scenarios,
        interval_minutes=float(spec.interval_minutes),
        variable_name="flow",
        bridge_edges=plan.bridges,
    )
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus
