"""Windowing, splits, losses, the optimizer, and the training loop.

Scenarios are split scenario-disjoint by default: training and test sets
never share a scenario id, so evaluation measures generalization to
unseen topologies. Validation windows are the chronological tail of each
training scenario. Mini-batches are scenario-homogeneous because the
spatial branch consumes one topology per forward pass; batch order and
the windows within each batch are reshuffled every epoch from the run
seed, so identical seeds replay identical loss curves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset_io import GeneratedCorpus, ScenarioDataset
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .model import Model
from .tensor import Tensor

LOSS_KINDS = ("mae", "mse", "smoothed_l1")


@dataclass
class TrainConfig:
    loss: str = "mae"
    learning_rate: float = 5e-4
    weight_decay: float = 0.1
    batch_size: int = 5
    epochs: int = 20
    seed: int = 0
    normalization: str = "zscore"

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"train.loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be nonnegative, got {self.weight_decay}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.normalization not in ("zscore", "none"):
            raise ConfigError(f"train.normalization must be zscore or none, got {self.normalization!r}")


@dataclass
class SplitSpec:
    mode: str = "scenario_disjoint"
    val_ratio: float = 0.2
    train_ratio: float = 0.7  # chronological mode only
    train_scenarios: list[str] | None = None
    test_scenarios: list[str] | None = None

    def validate(self) -> None:
        if self.mode not in ("scenario_disjoint", "chronological"):
            raise ConfigError(f"split.mode must be scenario_disjoint or chronological, got {self.mode!r}")
        if not 0.0 <= self.val_ratio < 1.0:
            raise ConfigError(f"split.val_ratio must be in [0, 1), got {self.val_ratio}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"split.train_ratio must be in (0, 1), got {self.train_ratio}")


def make_windows(series: np.ndarray, history: int, horizon: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """All stride-1 sliding (input, target) pairs in chronological order."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"series must be (T, N), got shape {s.shape}")
    need = history + horizon
    if s.shape[0] < need:
        raise DataError(f"series too short: T={s.shape[0]} but H + H' = {need} steps are required")
    return [(s[i : i + history], s[i + history : i + need]) for i in range(s.shape[0] - need + 1)]


def window_arrays(series: np.ndarray, history: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """make_windows stacked into (W, H, N) inputs and (W, H', N) targets."""
    pairs = make_windows(series, history, horizon)
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def loss(pred: Tensor, target, kind: str) -> Tensor:
    """Differentiable scalar loss between a prediction tensor and targets."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != t.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {t.shape}")
    diff = T.sub(pred, t)
    if kind == "mae":
        return T.reduce_mean(T.absolute(diff))
    if kind == "mse":
        return T.reduce_mean(T.mul(diff, diff))
    if kind == "smoothed_l1":
        return T.reduce_mean(T.smooth_l1(diff))
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def persistence_baseline(inputs: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed step over the horizon."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"inputs must be (B, H, N) with H >= 1, got {x.shape}")
    return np.repeat(x[:, -1:, :], horizon, axis=1)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adaptive-moment optimizer with decoupled weight decay.

    Decay is applied to the parameter before the moment update; the moment
    update itself is the standard bias-corrected rule with beta1=0.9,
    beta2=0.999, eps=1e-8.
    """

    def __init__(self, learning_rate: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        self.t += 1
        for path, p in params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise NumericalError(f"NaN gradient in parameter {path!r}")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m.setdefault(path, np.zeros_like(p.data))
            v = self.v.setdefault(path, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, state: AdamState) -> None:
    """One optimizer step over every parameter with a gradient."""
    state.step(params)


# ---------------------------------------------------------------------------
# split resolution


@dataclass
class ResolvedSplit:
    """Window indices per scenario for each role."""

    train: list[tuple[ScenarioDataset, np.ndarray]] = field(default_factory=list)
    val: list[tuple[ScenarioDataset, np.ndarray]] = field(default_factory=list)
    test: list[tuple[ScenarioDataset, np.ndarray]] = field(default_factory=list)

    def part(self, name: str) -> list[tuple[ScenarioDataset, np.ndarray]]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"split part must be train, val or test, got {name!r}")
        return getattr(self, name)


def _window_count(scenario: ScenarioDataset, history: int, horizon: int) -> int:
    count = scenario.series.shape[0] - history - horizon + 1
    if count < 1:
        raise DataError(
            f"scenario {scenario.scenario_id!r} is too short: T={scenario.series.shape[0]}, "
            f"need at least {history + horizon}"
        )
    return count


def resolve_split(corpus: GeneratedCorpus, spec: SplitSpec, history: int, horizon: int) -> ResolvedSplit:
    spec.validate()
    out = ResolvedSplit()
    if spec.mode == "chronological":
        for scen in corpus.scenarios:
            count = _window_count(scen, history, horizon)
            train_end = max(1, int(count * spec.train_ratio))
            val_end = min(count, train_end + max(0, int(count * spec.val_ratio)))
            idx = np.arange(count)
            out.train.append((scen, idx[:train_end]))
            if val_end > train_end:
                out.val.append((scen, idx[train_end:val_end]))
            if count > val_end:
                out.test.append((scen, idx[val_end:]))
        return out

    by_id = {s.scenario_id: s for s in corpus.scenarios}
    if spec.train_scenarios is not None or spec.test_scenarios is not None:
        train_ids = list(spec.train_scenarios or [])
        test_ids = list(spec.test_scenarios or [])
        for sid in train_ids + test_ids:
            if sid not in by_id:
                raise ConfigError(f"split names unknown scenario {sid!r}")
    else:
        train_ids = [s.scenario_id for s in corpus.scenarios if s.split_hint == "train"]
        test_ids = [s.scenario_id for s in corpus.scenarios if s.split_hint == "test"]
        if not train_ids:
            raise ConfigError("corpus carries no train split hints; name split.train_scenarios explicitly")
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ConfigError(f"train and test scenario sets must be disjoint; both contain {sorted(overlap)}")

    for sid in train_ids:
        scen = by_id[sid]
        count = _window_count(scen, history, horizon)
        n_val = int(round(count * spec.val_ratio))
        n_val = min(n_val, count - 1)  # at least one training window
        idx = np.arange(count)
        out.train.append((scen, idx[: count - n_val]))
        if n_val > 0:
            out.val.append((scen, idx[count - n_val :]))
    for sid in test_ids:
        scen = by_id[sid]
        count = _window_count(scen, history, horizon)
        out.test.append((scen, np.arange(count)))
    return out


def normalization_stats(entries: list[tuple[ScenarioDataset, np.ndarray]]) -> tuple[float, float]:
    """Global mean/std over the training scenarios' observations."""
    values = np.concatenate([scen.series.reshape(-1) for scen, _ in entries])
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise DataError("training scenarios contain no finite observations")
    mean = float(values.mean())
    std = float(values.std())
    if std < 1e-12:
        std = 1.0  # constant series: shift only
    return mean, std


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    diverged: bool
    divergence_note: str | None = None


def _batched_eval_loss(model: Model, cache: dict, entries, kind: str, batch_size: int = 64) -> float | None:
    total, count = 0.0, 0
    for scen, idx in entries:
        xs, ys = cache[scen.scenario_id]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            pred = model.forward(Tensor(xs[chunk]), scen.graph, training=False)
            total += loss(pred, ys[chunk], kind).item() * len(chunk)
            count += len(chunk)
    return total / count if count else None


def fit(model: Model, corpus: GeneratedCorpus, train_cfg: TrainConfig, split_spec: SplitSpec) -> FitResult:
    """Train in place; the model ends up holding the best-validation weights."""
    train_cfg.validate()
    split = resolve_split(corpus, split_spec, model.config.history, model.config.horizon)
    if not split.train:
        raise DataError("no training scenarios after split resolution")

    if train_cfg.normalization == "zscore":
        mean, std = normalization_stats(split.train)
        model.set_normalization("zscore", mean, std)
    else:
        model.set_normalization("none", 0.0, 1.0)

    # normalized window arrays per scenario, shared by train and val parts
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for scen, _ in split.train:
        cache[scen.scenario_id] = window_arrays(
            model.normalize_array(scen.series), model.config.history, model.config.horizon
        )

    optimizer = AdamState(train_cfg.learning_rate, train_cfg.weight_decay)
    shuffle_rng = np.random.default_rng([int(train_cfg.seed), 1])
    dropout_rng = np.random.default_rng([int(train_cfg.seed), 2])

    history: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_state = model.params.snapshot()
    diverged = False
    note = None

    for epoch in range(int(train_cfg.epochs)):
        started = time.perf_counter()
        batches: list[tuple[ScenarioDataset, np.ndarray]] = []
        for scen, idx in split.train:
            order = idx.copy()
            shuffle_rng.shuffle(order)
            for start in range(0, len(order), int(train_cfg.batch_size)):
                batches.append((scen, order[start : start + int(train_cfg.batch_size)]))
        batches = [batches[i] for i in shuffle_rng.permutation(len(batches))]

        total, count = 0.0, 0
        for scen, chunk in batches:
            xs, ys = cache[scen.scenario_id]
            pred = model.forward(Tensor(xs[chunk]), scen.graph, training=True, rng=dropout_rng)
            batch_loss = loss(pred, ys[chunk], train_cfg.loss)
            if not np.isfinite(batch_loss.data):
                diverged = True
                note = f"training loss became non-finite at epoch {epoch}"
                break
            model.params.zero_grads()
            T.backward(batch_loss)
            try:
                optimizer.step(model.params)
            except NumericalError as exc:
                diverged = True
                note = f"epoch {epoch}: {exc}"
                break
            total += batch_loss.item() * len(chunk)
            count += len(chunk)
        if diverged:
            break

        train_loss = total / count if count else float("nan")
        val_loss = _batched_eval_loss(model, cache, split.val, train_cfg.loss)
        selection = val_loss if val_loss is not None else train_loss
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
        )
        if selection < best_val:
            best_val = selection
            best_epoch = epoch
            best_state = model.params.snapshot()

    model.params.restore(best_state)
    return FitResult(history=history, best_epoch=best_epoch, diverged=diverged, divergence_note=note)


def collect_predictions(
    model: Model,
    entries: list[tuple[ScenarioDataset, np.ndarray]],
    final_step_only: bool = False,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw-scale predictions and targets over the given windows."""
    preds, truths = [], []
    for scen, idx in entries:
        xs, ys = window_arrays(scen.series, model.config.history, model.config.horizon)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            preds.append(model.predict(xs[chunk], scen.graph))
            truths.append(ys[chunk])
    if not preds:
        raise DataError("no windows to evaluate")
    pred = np.concatenate(preds, axis=0)
    truth = np.concatenate(truths, axis=0)
    if final_step_only:
        pred = pred[:, -1:, :]
        truth = truth[:, -1:, :]
    return pred, truth
