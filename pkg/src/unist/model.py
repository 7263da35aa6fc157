"""The decouple-then-fuse forecaster.

Three stages, merged only at the representation level:

* a temporal stack of K mixer blocks (a shared linear map along the
  history axis per node, then a two-layer MLP across the node axis per
  time step, each with ReLU, dropout, and a residual connection),
  followed by a learned history-to-horizon projection;
* a spatial encoder that composes task-adaptive relations from the
  scenario graph, propagates static node features through a shared graph
  convolution per channel, and projects the concatenated channels to one
  output per node and horizon step;
* a squeeze-excitation residual fusion that stacks the two streams as
  representation channels, gates them through a pooled bottleneck, and
  collapses the channel axis with a learned combiner.

Ablation variants drop or replace individual stages while preserving the
(B, H, N) -> (B, H', N) shape contract.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .graph import TrafficGraph, compose_relations, gcn_propagate
from .tensor import Tensor

VARIANTS = ("full", "no_spatial", "no_temporal", "no_fusion", "spatial_as_gcn", "temporal_as_fc")

_CHECKPOINT_MAGIC = b"USTPRED\x01"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; nodes/static_dim must match the corpus."""

    history: int = 9
    horizon: int = 1
    nodes: int = 24
    static_dim: int = 2
    temporal_blocks: int = 2
    feature_mix_width: int = 100
    channels: int = 4
    relation_layers: int = 2
    gcn_out: int = 8
    se_reduction: int = 2
    dropout: float = 0.2
    binary_adjacency: bool = False

    def validate(self) -> None:
        positives = (
            ("history", self.history),
            ("horizon", self.horizon),
            ("nodes", self.nodes),
            ("static_dim", self.static_dim),
            ("temporal_blocks", self.temporal_blocks),
            ("feature_mix_width", self.feature_mix_width),
            ("channels", self.channels),
            ("relation_layers", self.relation_layers),
            ("gcn_out", self.gcn_out),
            ("se_reduction", self.se_reduction),
        )
        for name, value in positives:
            if int(value) < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value}")
        if not 0.0 <= float(self.dropout) < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")

    @property
    def squeeze_width(self) -> int:
        # two representation channels squeezed by the reduction ratio
        return max(1, math.ceil(2 / self.se_reduction))


class ParamStore:
    """Ordered, path-addressable collection of learnable tensors."""

    def __init__(self, rng: np.random.Generator):
        self._params: dict[str, Tensor] = {}
        self._rng = rng

    def add_weight(self, path: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape)
        return self._register(path, data)

    def add_zeros(self, path: str, shape: tuple[int, ...]) -> Tensor:
        return self._register(path, np.zeros(shape))

    def _register(self, path: str, data: np.ndarray) -> Tensor:
        if path in self._params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        t = Tensor(data, requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def items(self):
        return self._params.items()

    def paths(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._params.items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for path, data in state.items():
            t = self._params[path]
            if t.data.shape != data.shape:
                raise ShapeError(f"parameter {path!r}: cannot restore {data.shape} into {t.data.shape}")
            t.data[...] = data


class Model:
    """One forecaster instance: config, variant, parameters, normalization.

    Read-only during inference; training owns the instance exclusively.
    """

    def __init__(self, config: ModelConfig, variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
        config.validate()
        self.config = config
        self.variant = variant
        self.norm_kind = "none"
        self.norm_mean = 0.0
        self.norm_std = 1.0
        self.params = ParamStore(np.random.default_rng([int(seed), 0x5EED]))
        self._build()

    # -- parameter layout ---------------------------------------------------

    def _build(self) -> None:
        c = self.config
        p = self.params
        if self.variant == "no_temporal":
            p.add_weight("temporal.last_obs.scale", (c.nodes,), fan_in=1)
            p.add_zeros("temporal.last_obs.bias", (c.nodes,))
        elif self.variant == "temporal_as_fc":
            p.add_weight(
                "temporal.fc.weight",
                (c.history * c.nodes, c.horizon * c.nodes),
                fan_in=c.history * c.nodes,
            )
        else:
            for k in range(c.temporal_blocks):
                p.add_weight(f"temporal.block{k}.time_mix.weight", (c.history, c.history), fan_in=c.history)
                p.add_zeros(f"temporal.block{k}.time_mix.bias", (c.history,))
                p.add_weight(f"temporal.block{k}.feature_mix.w1", (c.nodes, c.feature_mix_width), fan_in=c.nodes)
                p.add_zeros(f"temporal.block{k}.feature_mix.b1", (c.feature_mix_width,))
                p.add_weight(f"temporal.block{k}.feature_mix.w2", (c.feature_mix_width, c.nodes), fan_in=c.feature_mix_width)
                p.add_zeros(f"temporal.block{k}.feature_mix.b2", (c.nodes,))
            p.add_weight("temporal.head.weight", (c.history, c.horizon), fan_in=c.history)

        if self.variant != "no_spatial":
            if self.variant != "spatial_as_gcn":
                for ch in range(c.channels):
                    for layer in range(c.relation_layers):
                        for slot in range(2):
                            p.add_zeros(f"spatial.relation_logits.c{ch}.l{layer}.s{slot}", (3,))
            p.add_weight("spatial.gcn.weight", (c.static_dim, c.gcn_out), fan_in=c.static_dim)
            p.add_weight("spatial.projection.weight", (c.channels * c.gcn_out, c.horizon), fan_in=c.channels * c.gcn_out)

        if self.variant == "no_fusion":
            p.add_weight("fusion.combiner", (2,), fan_in=2)
        else:
            p.add_weight("fusion.residual.ch0.weight", (c.nodes, c.nodes), fan_in=c.nodes)
            p.add_weight("fusion.residual.ch1.weight", (c.nodes, c.nodes), fan_in=c.nodes)
            p.add_weight("fusion.se.w1", (c.squeeze_width, 2), fan_in=2)
            p.add_weight("fusion.se.w2", (2, c.squeeze_width), fan_in=c.squeeze_width)
            p.add_weight("fusion.combiner", (2,), fan_in=2)

    # -- normalization ------------------------------------------------------

    def set_normalization(self, kind: str, mean: float, std: float) -> None:
        if kind not in ("zscore", "none"):
            raise ConfigError(f"unknown normalization {kind!r}")
        if kind == "zscore" and not std > 0:
            raise ConfigError(f"z-score normalization needs positive std, got {std}")
        self.norm_kind = kind
        self.norm_mean = float(mean)
        self.norm_std = float(std)

    def normalize_array(self, x: np.ndarray) -> np.ndarray:
        if self.norm_kind == "none":
            return np.asarray(x, dtype=np.float64)
        return (np.asarray(x, dtype=np.float64) - self.norm_mean) / self.norm_std

    def denormalize_array(self, x: np.ndarray) -> np.ndarray:
        if self.norm_kind == "none":
            return np.asarray(x, dtype=np.float64)
        return np.asarray(x, dtype=np.float64) * self.norm_std + self.norm_mean

    # -- temporal stream ----------------------------------------------------

    def time_mix(self, x: Tensor, k: int, training: bool, rng) -> Tensor:
        """x + dropout(ReLU(W_t x + b)) along the history axis, per node."""
        w = self.params[f"temporal.block{k}.time_mix.weight"]
        b = self.params[f"temporal.block{k}.time_mix.bias"]
        xt = T.transpose(x, (0, 2, 1))  # (B, N, H)
        mixed = T.add(T.matmul(xt, T.transpose(w)), b)
        mixed = T.dropout(T.relu(mixed), self.config.dropout, training, rng)
        return T.add(x, T.transpose(mixed, (0, 2, 1)))

    def feature_mix(self, x: Tensor, k: int, training: bool, rng) -> Tensor:
        """x + W2(dropout(ReLU(W1 x + b1))) + b2 across the node axis, per step."""
        w1 = self.params[f"temporal.block{k}.feature_mix.w1"]
        b1 = self.params[f"temporal.block{k}.feature_mix.b1"]
        w2 = self.params[f"temporal.block{k}.feature_mix.w2"]
        b2 = self.params[f"temporal.block{k}.feature_mix.b2"]
        hidden = T.dropout(T.relu(T.add(T.matmul(x, w1), b1)), self.config.dropout, training, rng)
        return T.add(x, T.add(T.matmul(hidden, w2), b2))

    def temporal_forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """(B, H, N) -> (B, H', N) through the mixer stack and horizon head."""
        c = self.config
        if self.variant == "no_temporal":
            pick_last = np.zeros((c.history, c.horizon))
            pick_last[c.history - 1, :] = 1.0
            last = T.transpose(T.matmul(T.transpose(x, (0, 2, 1)), Tensor(pick_last)), (0, 2, 1))
            return T.add(T.mul(last, self.params["temporal.last_obs.scale"]), self.params["temporal.last_obs.bias"])
        if self.variant == "temporal_as_fc":
            flat = T.reshape(x, (x.shape[0], c.history * c.nodes))
            out = T.matmul(flat, self.params["temporal.fc.weight"])
            return T.reshape(out, (x.shape[0], c.horizon, c.nodes))
        y = x
        for k in range(c.temporal_blocks):
            y = self.time_mix(y, k, training, rng)
            y = self.feature_mix(y, k, training, rng)
        head = self.params["temporal.head.weight"]
        return T.transpose(T.matmul(T.transpose(y, (0, 2, 1)), head), (0, 2, 1))

    # -- spatial stream -----------------------------------------------------

    def spatial_forward(self, graph: TrafficGraph) -> Tensor:
        """(H', N) static-topology representation; independent of the series."""
        c = self.config
        candidates = graph.candidates(binary=c.binary_adjacency)
        if self.variant == "spatial_as_gcn":
            raw = Tensor(candidates.matrices[0])
            composed = [raw for _ in range(c.channels)]
        else:
            logits = [
                [
                    [
                        self.params[f"spatial.relation_logits.c{ch}.l{layer}.s{slot}"]
                        for slot in range(2)
                    ]
                    for layer in range(c.relation_layers)
                ]
                for ch in range(c.channels)
            ]
            composed = compose_relations(candidates, logits)
        feats = Tensor(graph.static_features)
        w = self.params["spatial.gcn.weight"]
        channels = [gcn_propagate(a, feats, w) for a in composed]
        z = T.concat(channels, axis=1)  # (N, C * gcn_out)
        projected = T.matmul(z, self.params["spatial.projection.weight"])  # (N, H')
        return T.transpose(projected)

    # -- fusion ------------------------------------------------------------

    def se_fuse(self, y1: Tensor, y2b: Tensor) -> Tensor:
        """Stack the streams, gate via squeeze-excitation, collapse channels."""
        batch = y1.shape[0]
        r0 = self.params["fusion.residual.ch0.weight"]
        r1 = self.params["fusion.residual.ch1.weight"]
        z0 = T.relu(T.matmul(y1, T.transpose(r0)))
        z1 = T.relu(T.matmul(y2b, T.transpose(r1)))
        joint = T.stack([y1, y2b], axis=1)  # (B, 2, H', N)
        z = T.stack([z0, z1], axis=1)

        pooled = T.reduce_mean(z, axes=(2, 3))  # (B, 2)
        squeezed = T.relu(T.matmul(pooled, T.transpose(self.params["fusion.se.w1"])))
        gate = T.sigmoid(T.matmul(squeezed, T.transpose(self.params["fusion.se.w2"])))
        gated = T.mul(z, T.reshape(gate, (batch, 2, 1, 1)))

        fused = T.add(joint, gated)
        comb = T.reshape(self.params["fusion.combiner"], (1, 2, 1, 1))
        return T.reduce_sum(T.mul(fused, comb), axes=1)

    def channel_gates(self, y1: Tensor, y2b: Tensor) -> Tensor:
        """The (B, 2) sigmoid gates the fusion applies, for inspection."""
        z0 = T.relu(T.matmul(y1, T.transpose(self.params["fusion.residual.ch0.weight"])))
        z1 = T.relu(T.matmul(y2b, T.transpose(self.params["fusion.residual.ch1.weight"])))
        pooled = T.reduce_mean(T.stack([z0, z1], axis=1), axes=(2, 3))
        squeezed = T.relu(T.matmul(pooled, T.transpose(self.params["fusion.se.w1"])))
        return T.sigmoid(T.matmul(squeezed, T.transpose(self.params["fusion.se.w2"])))

    # -- full pass ----------------------------------------------------------

    def forward(self, x: Tensor, graph: TrafficGraph, training: bool = False, rng=None) -> Tensor:
        """(B, H, N) -> (B, H', N) in the model's (normalized) value space."""
        c = self.config
        if x.ndim != 3 or x.shape[1] != c.history or x.shape[2] != c.nodes:
            raise ShapeError(f"input must be (B, {c.history}, {c.nodes}), got {x.shape}")
        if graph.num_nodes != c.nodes:
            raise DataError(f"graph has {graph.num_nodes} nodes, model expects {c.nodes}")
        if self.variant != "no_spatial" and graph.static_dim != c.static_dim:
            raise DataError(
                f"graph static features have dim {graph.static_dim}, model expects {c.static_dim}"
            )
        batch = x.shape[0]
        y1 = self.temporal_forward(x, training, rng)
        if self.variant == "no_spatial":
            y2b = y1
        else:
            y2 = self.spatial_forward(graph)
            y2b = T.add(Tensor(np.zeros((batch,) + y2.shape)), y2)
        if self.variant == "no_fusion":
            comb = T.reshape(self.params["fusion.combiner"], (1, 2, 1, 1))
            joint = T.stack([y1, y2b], axis=1)
            return T.reduce_sum(T.mul(joint, comb), axes=1)
        return self.se_fuse(y1, y2b)

    def predict_tensor(self, x_raw: Tensor, graph: TrafficGraph) -> Tensor:
        """Differentiable raw-in / raw-out pass (normalization inside the tape)."""
        if self.norm_kind == "none":
            return self.forward(x_raw, graph, training=False)
        xn = T.mul(T.sub(x_raw, self.norm_mean), 1.0 / self.norm_std)
        yn = self.forward(xn, graph, training=False)
        return T.add(T.mul(yn, self.norm_std), self.norm_mean)

    def predict(self, x_raw: np.ndarray, graph: TrafficGraph) -> np.ndarray:
        """Raw-valued batch prediction in eval mode."""
        out = self.predict_tensor(Tensor(np.asarray(x_raw, dtype=np.float64)), graph)
        return out.data


def build_variant(config: ModelConfig, kind: str, seed: int = 0) -> Model:
    """Construct the full model or one of the five ablation variants."""
    return Model(config, variant=kind, seed=seed)


def count_params(model: Model) -> int:
    """Number of scalar learnables."""
    return model.params.count()


# ---------------------------------------------------------------------------
# checkpoint format: magic, u64-LE header length, JSON header, raw <f8 blobs


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    from . import __version__

    manifest = [{"path": p, "shape": list(t.data.shape)} for p, t in model.params.items()]
    header = {
        "format": 1,
        "tool_version": __version__,
        "variant": model.variant,
        "config": asdict(model.config),
        "normalization": {"kind": model.norm_kind, "mean": model.norm_mean, "std": model.norm_std},
        "meta": meta or {},
        "params": manifest,
    }
    blob = io.BytesIO()
    blob.write(_CHECKPOINT_MAGIC)
    header_bytes = json.dumps(header, sort_keys=False).encode("utf-8")
    blob.write(struct.pack("<Q", len(header_bytes)))
    blob.write(header_bytes)
    for _, t in model.params.items():
        blob.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(_CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    offset += header_len

    config = ModelConfig(**header["config"])
    model = Model(config, variant=header["variant"], seed=0)
    norm = header["normalization"]
    model.set_normalization(norm["kind"], norm["mean"], norm["std"])
    model.meta = header.get("meta") or {}

    expected = model.params.paths()
    declared = [entry["path"] for entry in header["params"]]
    if declared != expected:
        raise DataError(f"{path}: checkpoint parameters do not match the declared variant/config")
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: checkpoint truncated at parameter {entry['path']!r}")
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        model.params[entry["path"]].data[...] = data
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return model
