"""Operator CLI: generate, train, eval, predict, ablate, scenarios, attribute.

Every command is deterministic given (config, seed, corpus) and echoes its
resolved configuration plus the tool version into the output directory, so
any run can be reproduced from its artifacts. Exit codes: 0 success,
2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import export_importance, road_importance
from .datagen import SyntheticSpec, generate_corpus
from .dataset_io import GeneratedCorpus, load_corpus
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .metrics import masked_metrics, report_with_per_node
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .training import SplitSpec, TrainConfig, collect_predictions, fit, resolve_split

VARIANT_LABELS = {
    "full": "full",
    "no_spatial": "w/o spatial",
    "no_temporal": "w/o temporal",
    "no_fusion": "w/o fusion",
    "spatial_as_gcn": "spatial → GCN",
    "temporal_as_fc": "temporal → FC",
}

DEFAULT_CONFIG = {
    "model": {
        "variant": "full",
        "history": 9,
        "horizon": 1,
        "nodes": None,
        "static_dim": None,
        "temporal_blocks": 2,
        "feature_mix_width": 100,
        "channels": 4,
        "relation_layers": 2,
        "gcn_out": 8,
        "se_reduction": 2,
        "dropout": 0.2,
        "binary_adjacency": False,
    },
    "train": {
        "loss": "mae",
        "learning_rate": 5e-4,
        "weight_decay": 0.1,
        "batch_size": 5,
        "epochs": 20,
        "seed": 0,
        "normalization": "zscore",
    },
    "split": {
        "mode": "scenario_disjoint",
        "val_ratio": 0.2,
        "train_ratio": 0.7,
        "train_scenarios": None,
        "test_scenarios": None,
    },
}


# ---------------------------------------------------------------------------
# config plumbing


def _merge_config(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_config(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def load_run_config(path, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    """Config file merged over the defaults, then --set/--seed overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"missing config file: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        _merge_config(config, raw)
    for assignment in overrides or []:
        _apply_set(config, assignment)
    if seed is not None:
        config["train"]["seed"] = int(seed)
    return config


def resolve_configs(config: dict, corpus: GeneratedCorpus) -> tuple[ModelConfig, str, TrainConfig, SplitSpec]:
    """Instantiate typed configs, filling nodes/static_dim from the corpus."""
    model_raw = dict(config["model"])
    variant = model_raw.pop("variant")
    if not corpus.scenarios:
        raise DataError("corpus has no scenarios")
    nodes = corpus.num_nodes
    static_dim = corpus.scenarios[0].graph.static_dim
    if model_raw.get("nodes") is None:
        model_raw["nodes"] = nodes
    elif int(model_raw["nodes"]) != nodes:
        raise ConfigError(f"config says {model_raw['nodes']} nodes but the corpus has {nodes}")
    if model_raw.get("static_dim") is None:
        model_raw["static_dim"] = static_dim
    elif int(model_raw["static_dim"]) != static_dim:
        raise ConfigError(
            f"config says static_dim={model_raw['static_dim']} but the corpus graphs carry {static_dim}"
        )
    model_cfg = ModelConfig(**model_raw)
    train_cfg = TrainConfig(**config["train"])
    split_spec = SplitSpec(**config["split"])
    train_cfg.validate()
    split_spec.validate()
    model_cfg.validate()
    return model_cfg, variant, train_cfg, split_spec


def _resolve_threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("UNIST_THREADS", "1")
    try:
        threads = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"--threads must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return threads


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_provenance(out_dir: Path, command: str, config: dict, threads: int) -> None:
    _write_json(
        out_dir / "run_config.json",
        {"tool_version": __version__, "command": command, "threads": threads, "config": config},
    )


def _checkpoint_run_config(model: Model) -> dict:
    meta = getattr(model, "meta", None) or {}
    return {
        "model": {"variant": model.variant, **asdict(model.config)},
        "train": meta.get("train"),
        "split": meta.get("split"),
        "normalization": {"kind": model.norm_kind, "mean": model.norm_mean, "std": model.norm_std},
    }


def _split_spec_from_meta(model: Model) -> SplitSpec:
    meta = getattr(model, "meta", None) or {}
    raw = meta.get("split")
    return SplitSpec(**raw) if raw else SplitSpec()


def _intact_scenario(corpus: GeneratedCorpus):
    for scen in corpus.scenarios:
        if not scen.removed_edges:
            return scen
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, threads: int) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise DataError(f"missing generator spec: {spec_path}")
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}: invalid JSON: {exc}") from exc
    spec = SyntheticSpec.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(spec, out_dir=out)
    _write_provenance(out, "generate", {"spec": asdict(spec)}, threads)
    print(f"wrote {len(corpus.scenarios)} scenarios on {corpus.num_nodes} nodes to {out}")
    return 0


def cmd_train(args, threads: int) -> int:
    corpus = load_corpus(args.corpus)
    config = load_run_config(args.config, overrides=args.set, seed=args.seed)
    model_cfg, variant, train_cfg, split_spec = resolve_configs(config, corpus)
    resolved = copy.deepcopy(config)
    resolved["model"]["nodes"] = model_cfg.nodes
    resolved["model"]["static_dim"] = model_cfg.static_dim
    resolved["train"]["seed"] = train_cfg.seed

    model = Model(model_cfg, variant=variant, seed=train_cfg.seed)
    result = fit(model, corpus, train_cfg, split_spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.meta = {"train": resolved["train"], "split": resolved["split"]}
    save_checkpoint(model, out / "checkpoint.ckpt", meta=model.meta)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record) + "\n")
    _write_provenance(out, "train", resolved, threads)

    if result.diverged:
        print(f"training diverged: {result.divergence_note}; best-epoch checkpoint retained", file=sys.stderr)
        return 4
    best = result.history[result.best_epoch]
    print(
        f"trained {variant} for {len(result.history)} epochs; "
        f"best epoch {result.best_epoch} (val_loss={best['val_loss']:.6f}); wrote {out / 'checkpoint.ckpt'}"
    )
    return 0


def _load_model_and_corpus(args) -> tuple[Model, GeneratedCorpus]:
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if corpus.num_nodes != model.config.nodes:
        raise ConfigError(
            f"checkpoint expects {model.config.nodes} nodes but the corpus has {corpus.num_nodes}"
        )
    return model, corpus


def cmd_eval(args, threads: int) -> int:
    model, corpus = _load_model_and_corpus(args)
    split_spec = _split_spec_from_meta(model)
    split = resolve_split(corpus, split_spec, model.config.history, model.config.horizon)
    entries = split.part(args.split)
    if not entries:
        raise DataError(f"split {args.split!r} holds no windows in this corpus")
    pred, truth = collect_predictions(model, entries, final_step_only=args.final_step_only)
    report = report_with_per_node(pred, truth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "split": args.split,
        "final_step_only": bool(args.final_step_only),
        "scenario_ids": [scen.scenario_id for scen, _ in entries],
        **report.to_dict(),
    }
    _write_json(out / "metrics.json", payload)
    _write_provenance(out, "eval", _checkpoint_run_config(model), threads)
    mape = "absent" if report.mape_percent is None else f"{report.mape_percent:.3f}%"
    print(f"{args.split}: RMSE={report.rmse:.6f} MAE={report.mae:.6f} MAPE={mape}")
    return 0


def cmd_predict(args, threads: int) -> int:
    from .training import window_arrays

    model, corpus = _load_model_and_corpus(args)
    scen = corpus.scenario(args.scenario)
    xs, ys = window_arrays(scen.series, model.config.history, model.config.horizon)
    preds = []
    for start in range(0, len(xs), 64):
        preds.append(model.predict(xs[start : start + 64], scen.graph))
    pred = np.concatenate(preds, axis=0)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = model.config.nodes
    header = ",".join(f"node_{i}" for i in range(n))

    def rows(data: np.ndarray) -> str:
        flat = data.reshape(-1, n)
        lines = [header]
        lines.extend(",".join("%.9g" % v for v in row) for row in flat)
        return "\n".join(lines) + "\n"

    (out / f"prediction_{scen.scenario_id}.csv").write_text(rows(pred), encoding="utf-8")
    (out / f"truth_{scen.scenario_id}.csv").write_text(rows(ys), encoding="utf-8")
    _write_provenance(out, "predict", _checkpoint_run_config(model), threads)
    print(f"wrote {len(pred)} windows for scenario {scen.scenario_id!r} to {out}")
    return 0


def cmd_ablate(args, threads: int) -> int:
    corpus = load_corpus(args.corpus)
    config = load_run_config(args.config)
    model_cfg, _, train_cfg, split_spec = resolve_configs(config, corpus)
    seeds = [train_cfg.seed + i for i in range(int(args.seeds))]

    rows = []
    for kind, label in VARIANT_LABELS.items():
        per_seed = {"rmse": [], "mae": [], "mape_percent": []}
        for seed in seeds:
            cfg = TrainConfig(**{**asdict_train(train_cfg), "seed": seed})
            model = Model(model_cfg, variant=kind, seed=seed)
            fit(model, corpus, cfg, split_spec)
            split = resolve_split(corpus, split_spec, model_cfg.history, model_cfg.horizon)
            if not split.test:
                raise DataError("ablation needs a test split; the corpus has no test scenarios")
            pred, truth = collect_predictions(model, split.test)
            report = masked_metrics(pred, truth)
            per_seed["rmse"].append(report.rmse)
            per_seed["mae"].append(report.mae)
            per_seed["mape_percent"].append(report.mape_percent)
        rows.append(
            {
                "variant": label,
                "kind": kind,
                "rmse": _median(per_seed["rmse"]),
                "mae": _median(per_seed["mae"]),
                "mape_percent": _median(per_seed["mape_percent"]),
            }
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", {"seeds": seeds, "rows": rows})
    lines = [f"{'variant':<16} {'RMSE':>10} {'MAE':>10} {'MAPE(%)':>10}"]
    for row in rows:
        mape = "absent" if row["mape_percent"] is None else f"{row['mape_percent']:.3f}"
        lines.append(f"{row['variant']:<16} {row['rmse']:>10.4f} {row['mae']:>10.4f} {mape:>10}")
    (out / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_provenance(out, "ablate", {**config, "seeds": seeds}, threads)
    print("\n".join(lines))
    return 0


def asdict_train(cfg: TrainConfig) -> dict:
    return {
        "loss": cfg.loss,
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "normalization": cfg.normalization,
    }


def _median(values: list) -> float | None:
    usable = [v for v in values if v is not None]
    if not usable:
        return None
    return float(np.median(usable))


def cmd_scenarios(args, threads: int) -> int:
    model, corpus = _load_model_and_corpus(args)
    split_spec = _split_spec_from_meta(model)
    split = resolve_split(corpus, split_spec, model.config.history, model.config.horizon)
    test_ids = [scen.scenario_id for scen, _ in split.test]
    if not test_ids:
        raise DataError("corpus has no held-out scenarios to evaluate")
    intact = _intact_scenario(corpus)
    if intact is None:
        raise DataError("corpus has no intact scenario (every scenario removes edges)")

    rows = []
    intact_rmse = None
    for scen, idx in split.test:
        pred, truth = collect_predictions(model, [(scen, idx)])
        rmse = masked_metrics(pred, truth).rmse
        role = "intact" if scen.scenario_id == intact.scenario_id else "held_out"
        rows.append({"scenario": scen.scenario_id, "role": role, "windows": int(len(idx)), "rmse": rmse})
        if role == "intact":
            intact_rmse = rmse
    if intact_rmse is None:
        # intact scenario sits in the training split; score its validation windows
        val_idx = [idx for scen, idx in split.val if scen.scenario_id == intact.scenario_id]
        if not val_idx:
            raise DataError(
                f"intact scenario {intact.scenario_id!r} has no validation windows; "
                "raise split.val_ratio or hold the intact scenario out"
            )
        pred, truth = collect_predictions(model, [(intact, val_idx[0])])
        intact_rmse = masked_metrics(pred, truth).rmse
        rows.append(
            {"scenario": intact.scenario_id, "role": "intact", "windows": int(len(val_idx[0])), "rmse": intact_rmse}
        )

    rmses = [row["rmse"] for row in rows]
    spread = float(max(rmses) - min(rmses))
    payload = {
        "rows": rows,
        "intact_scenario": intact.scenario_id,
        "intact_rmse": intact_rmse,
        "spread": spread,
        "spread_ratio": spread / intact_rmse if intact_rmse > 0 else None,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "scenarios.json", payload)
    lines = [f"{'scenario':<12} {'role':<10} {'windows':>8} {'RMSE':>10}"]
    for row in rows:
        lines.append(f"{row['scenario']:<12} {row['role']:<10} {row['windows']:>8} {row['rmse']:>10.4f}")
    lines.append(f"spread = {spread:.4f} ({100 * spread / intact_rmse:.2f}% of intact RMSE)")
    (out / "scenarios.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_provenance(out, "scenarios", _checkpoint_run_config(model), threads)
    print("\n".join(lines))
    return 0


def cmd_attribute(args, threads: int) -> int:
    model, corpus = _load_model_and_corpus(args)
    scen = corpus.scenario(args.scenario)
    result = road_importance(model, scen, baseline_kind=args.baseline, steps=args.steps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_importance(result, out / "importance.csv", out / "attribution.json")

    intact = _intact_scenario(corpus)
    if scen.removed_edges and intact is not None and intact.scenario_id != scen.scenario_id:
        intact_result = road_importance(model, intact, baseline_kind=args.baseline, steps=args.steps)
        delta = result.values - intact_result.values
        lines = ["node_id,delta"]
        lines.extend(f"{i},{'%.9g' % v}" for i, v in enumerate(delta))
        (out / "importance_delta.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _write_provenance(out, "attribute", _checkpoint_run_config(model), threads)
    print(
        f"importance over {result.windows_used} windows of {scen.scenario_id!r}; "
        f"worst completeness gap {result.completeness_gap:.3e}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--threads", default=None, help="worker cap (default: env UNIST_THREADS or 1)")

    parser = argparse.ArgumentParser(prog="unist", description=__doc__)
    parser.add_argument("--version", action="version", version=f"unist {__version__}")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("generate", parents=[shared], help="build a synthetic scenario corpus")
    p.add_argument("--spec", required=True, help="generator spec JSON")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[shared], help="train a model on a corpus")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--set", action="append", default=[], metavar="key=value", help="dotted config override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True, choices=["train", "val", "test"])
    p.add_argument("--final-step-only", action="store_true", help="score only the last horizon step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[shared], help="write predicted series for one scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", parents=[shared], help="train and compare all model variants")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (base seed from config)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scenarios", parents=[shared], help="per-scenario robustness table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("attribute", parents=[shared], help="road importance via integrated gradients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--baseline", choices=["zeros", "mean"], default="zeros")
    p.add_argument("--steps", type=int, default=64, metavar="m")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        threads = _resolve_threads(args)
        return args.func(args, threads)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
