"""Command-line driver for every stage of an experiment.

Each subcommand reads its inputs from, and writes its outputs into, the output
directory (``--out``, else ``PSLORA_OUT_DIR``)::

    base.pslw              pretrain
    adapters.pslr          train
    accuracy_matrix.json   train
    loss_traces.csv        train
    run.json               train
    merged_<strategy>.pslw merge
    merge_<strategy>.json  merge
    eval.json              eval
    metrics.json           metrics
    analysis/...           analyze
    ablation.json          ablate
    data/...               export-data
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.analysis.shift import run_histograms
from src.analysis.signs import SWEEP_K, sign_split, sign_subset_sweep, sign_tolerance
from src.analysis.similarity import similarity_trace
from src.analysis.taylor import perturbation_study, readout_objective
from src.cli.checkpoint import read_adapters, read_weights, write_adapters, write_weights
from src.config import ExperimentConfig, Settings, get_settings
from src.data.synthetic import TaskSequence, export_csv, make_sequence
from src.experiments.ablation import prepare_base, pretraining_pool, run_ablation, with_final_column
from src.lora.adapter import LoraAdapter, cumulative_delta, delta
from src.lora.model import BaseModel, ContinualModel, DenseLayer
from src.merging.merge import MergePolicy, merge_checksum, merge_fold, merged_weights, per_layer_selection
from src.metrics.continual import AccuracyMatrix, seed_std, summarize
from src.shared.errors import ConfigError, PSLoraError
from src.shared.io import read_json, require_files, write_csv, write_json
from src.shared.schemas import (
    EvalReport,
    MergeReport,
    MetricsReport,
    MetricsSummary,
    RunReport,
    SignStatsRow,
    TaylorReport,
)
from src.training.evaluation import evaluate
from src.training.trainer import new_model, run_sequence

LOGGER = logging.getLogger(__name__)

STRATEGIES = ("magnitude_max", "average", "ties")
BASE_FILE = "base.pslw"
ADAPTERS_FILE = "adapters.pslr"
MATRIX_FILE = "accuracy_matrix.json"


def _configure_logging(verbose: bool, level_name: str = "INFO") -> None:
    level = logging.DEBUG if verbose else getattr(logging, level_name.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s %(message)s", force=True)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < ``--config`` JSON < flags."""
    document: Dict[str, Any] = {}
    if args.config is not None:
        document = read_json(Path(args.config))
        if not isinstance(document, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
    overrides = {
        "seed": args.seed,
        "alpha": args.alpha,
        "merge_strategy": args.merge_strategy,
        "merge_cadence": args.merge_cadence,
        "order": _parse_order(args.order) if args.order else None,
        "out_dir": args.out,
    }
    if args.lam is not None:
        document.pop("lam", None)
        document["lambda"] = args.lam
    document.update({key: value for key, value in overrides.items() if value is not None})
    return ExperimentConfig.model_validate(document)


def _parse_order(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--order expects comma-separated task indices, got {text!r}") from None


def _group(adapters: Sequence[LoraAdapter]) -> Dict[str, List[LoraAdapter]]:
    grouped: Dict[str, List[LoraAdapter]] = {}
    for adapter in adapters:
        grouped.setdefault(adapter.layer_id, []).append(adapter)
    for group in grouped.values():
        group.sort(key=lambda a: a.task_index)
    counts = {lid: len(group) for lid, group in grouped.items()}
    if len(set(counts.values())) > 1:
        raise ConfigError(f"layers hold different numbers of adapters: {counts}")
    return grouped


def _stack(base: BaseModel, grouped: Dict[str, List[LoraAdapter]], cfg: ExperimentConfig, settings: Settings) -> ContinualModel:
    """Rebuild the unmerged model by freezing the adapters task by task."""
    model = new_model(base, cfg.to_train_config(settings).model_copy(update={"injected": list(grouped)}))
    n_tasks = len(next(iter(grouped.values()))) if grouped else 0
    for t in range(n_tasks):
        model.commit({lid: group[t] for lid, group in grouped.items()})
    return model


def _load_run(out: Path, adapters_path: Optional[str]):
    paths = [out / BASE_FILE, Path(adapters_path) if adapters_path else out / ADAPTERS_FILE]
    require_files(paths)
    adapters = read_adapters(paths[1])
    if not adapters:
        raise ConfigError(f"{paths[1]} holds no adapters")
    return read_weights(paths[0]), _group(adapters)


def _sequence(cfg: ExperimentConfig, n_trained: Optional[int] = None) -> TaskSequence:
    sequence = make_sequence(cfg.to_sequence_spec())
    if n_trained is not None and n_trained != len(sequence):
        raise ConfigError(f"adapters cover {n_trained} tasks but the config describes {len(sequence)}")
    return sequence


def cmd_pretrain(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    base = prepare_base(cfg, settings)
    write_weights(out / BASE_FILE, base)
    accuracy = evaluate(base, pretraining_pool(cfg), settings.threads)
    write_json(out / "pretrain.json", {"base_accuracy": accuracy, "config": cfg.resolved()})
    print(f"base accuracy on the pretraining mixture: {accuracy:.4f}")
    return 0


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    if args.dry_run:
        print(json.dumps(cfg.resolved(), indent=2))
        return 0
    out = cfg.resolved_out_dir(settings)
    require_files([out / BASE_FILE])
    base = read_weights(out / BASE_FILE)
    sequence = _sequence(cfg)
    train_cfg = cfg.to_train_config(settings)
    artifacts = run_sequence(sequence, train_cfg, base)

    ordered = [a for lid in base.layer_ids if lid in artifacts.adapters for a in artifacts.adapters[lid]]
    ordered.sort(key=lambda a: a.task_index)
    write_adapters(out / ADAPTERS_FILE, ordered)

    matrix = artifacts.acc_matrix
    write_json(out / MATRIX_FILE, {**matrix.to_dict(), "config": cfg.resolved()})
    trace_rows = [
        {"task": trace.task_index, "step": step, "total": total, "fidelity": fid, "stability": stab}
        for trace in artifacts.loss_traces
        for step, (total, fid, stab) in enumerate(zip(trace.total, trace.fidelity, trace.stability))
    ]
    write_csv(out / "loss_traces.csv", trace_rows, columns=("task", "step", "total", "fidelity", "stability"))
    report = RunReport(
        tasks=[task.name for task in sequence],
        sign_stats=[
            SignStatsRow(
                task=s.task_index,
                same_fraction=s.same_fraction,
                opposite_fraction=s.opposite_fraction,
                raw_same_fraction=s.raw_same_fraction,
                raw_opposite_fraction=s.raw_opposite_fraction,
                per_layer=s.per_layer,
            )
            for s in artifacts.sign_stats
        ],
        convergence=artifacts.convergence,
        merged_acc=artifacts.merged_acc,
        merge_gain=artifacts.merge_gain,
        metrics=MetricsReport(**summarize(matrix)),
        merged_metrics=MetricsReport(**summarize(with_final_column(matrix, artifacts.merged_acc))),
        config=cfg.resolved(),
    )
    write_json(out / "run.json", report.model_dump())
    return 0


def cmd_merge(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    base, grouped = _load_run(out, args.adapters)
    policy = cfg.to_merge_policy()
    weights = merged_weights(base, grouped, policy, cfg.scaling, list(grouped))
    merged = BaseModel(
        layers=tuple(DenseLayer(layer.layer_id, w, b) for layer, (w, b) in zip(base.layers, weights)),
        activation=base.activation,
    )
    write_weights(out / f"merged_{policy.strategy}.pslw", merged)
    report = MergeReport(
        strategy=policy.strategy,
        ties_trim_fraction=policy.ties_trim_fraction if policy.strategy == "ties" else None,
        checksum=merge_checksum([w for w, _ in weights]),
        n_tasks=len(next(iter(grouped.values()))),
        selection=per_layer_selection(grouped, cfg.scaling) if policy.strategy == "magnitude_max" else None,
        config=cfg.resolved(),
    )
    write_json(out / f"merge_{policy.strategy}.json", report.model_dump())
    print(f"{policy.strategy} checksum {report.checksum}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    base, grouped = _load_run(out, args.adapters)
    model = _stack(base, grouped, cfg, settings)
    sequence = _sequence(cfg, model.task_count)
    merged = {}
    for strategy in STRATEGIES:
        policy = MergePolicy(strategy=strategy, ties_trim_fraction=cfg.ties_trim_fraction)
        weights = merged_weights(base, grouped, policy, cfg.scaling, list(grouped))
        merged[strategy] = [evaluate(weights, task, settings.threads) for task in sequence]
    report = EvalReport(
        tasks=[task.name for task in sequence],
        unmerged=[evaluate(model, task, settings.threads) for task in sequence],
        merged=merged,
        config=cfg.resolved(),
    )
    write_json(out / "eval.json", report.model_dump())
    return 0


def cmd_metrics(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    sources = [Path(p) for p in args.runs] if args.runs else [out / MATRIX_FILE]
    require_files(sources)
    peak = "a(i,i) only" if args.fr_literal else "max over j >= i"
    reports = [
        MetricsReport(**summarize(AccuracyMatrix.from_dict(read_json(path)), fr_literal=args.fr_literal), fr_peak=peak)
        for path in sources
    ]
    per_order_std: Dict[str, Optional[float]] = {}
    for key in ("acc", "bwt", "fwt", "fr", "aaa"):
        values = [getattr(r, key) for r in reports]
        per_order_std[key] = None if any(v is None for v in values) else seed_std(values)
    summary = MetricsSummary(runs=reports, sources=[str(p) for p in sources], per_order_std=per_order_std, config=cfg.resolved())
    write_json(out / "metrics.json", summary.model_dump())
    return 0


def _analyze_sign_split(cfg, base, grouped, sequence, out: Path, settings: Settings) -> None:
    tol = sign_tolerance(cfg.alpha)
    rows = []
    for t in range(1, len(sequence) + 1):
        for lid, group in grouped.items():
            dims = base.layer(lid).dims
            history = cumulative_delta(group[: t - 1], dims, cfg.scaling)
            update = delta(group[t - 1], cfg.scaling)
            split = sign_split(update, history, 100.0)
            decided = sign_split(update, history, 100.0, tol)
            rows.append(
                {
                    "task": t,
                    "layer": lid,
                    "same_fraction": split.same_fraction,
                    "opposite_fraction": split.opposite_fraction,
                    "decided_same_fraction": decided.same_fraction,
                    "decided_opposite_fraction": decided.opposite_fraction,
                }
            )
    columns = ("task", "layer", "same_fraction", "opposite_fraction", "decided_same_fraction", "decided_opposite_fraction")
    write_csv(out / "sign_split.csv", rows, columns=columns)
    last = len(sequence)
    frozen = {lid: cumulative_delta(g[: last - 1], base.layer(lid).dims, cfg.scaling) for lid, g in grouped.items()}
    current = {lid: delta(g[last - 1], cfg.scaling) for lid, g in grouped.items()}
    sweep = sign_subset_sweep(base, frozen, current, list(sequence), SWEEP_K, settings.threads)
    write_csv(out / "sign_sweep.csv", sweep, columns=("k", "variant", "accuracy", "same_fraction", "opposite_fraction"))
    write_json(out / "sign_split.json", {"task": last, "k_grid": list(SWEEP_K), "evaluated_on": "all seen tasks", "sweep": sweep, "config": cfg.resolved()})


def _analyze_shift(cfg, base, grouped, sequence, out: Path, settings: Settings) -> None:
    for lid, group in grouped.items():
        dims = base.layer(lid).dims
        stages = [cumulative_delta(group[:t], dims, cfg.scaling) for t in range(1, len(group) + 1)]
        for hist in run_histograms(stages, cfg.top_fraction, cfg.pool_window):
            write_csv(out / "shift_hist" / f"{lid}_task{hist.task_index}.csv", hist.rows(), columns=("bin_lo", "bin_hi", "count"))


def _analyze_similarity(cfg, base, grouped, sequence, out: Path, settings: Settings) -> None:
    policy = cfg.to_merge_policy()
    rows = []
    for lid, group in grouped.items():
        deltas = [delta(a, cfg.scaling) for a in group]
        running = [merge_fold(deltas[:t], policy) for t in range(1, len(deltas) + 1)]
        for row in similarity_trace(deltas, running):
            rows.append({"layer": lid, **row})
    write_csv(out / "similarity.csv", rows, columns=("layer", "task", "delta_vs_first", "merged_vs_first"))


def _analyze_taylor(cfg, base, grouped, sequence, out: Path, settings: Settings) -> None:
    model = _stack(base, grouped, cfg, settings)
    objective = readout_objective(model.effective_weights(), sequence[len(sequence) - 1], ridge=cfg.taylor_ridge)
    checks = perturbation_study(objective, cfg.taylor_directions, cfg.taylor_radius, seed=cfg.seed)
    ratios = [c.delta_loss / c.bound for c in checks if c.bound > 0]
    report = TaylorReport(
        lambda_max=checks[0].lambda_max,
        ridge=cfg.taylor_ridge,
        radius=cfg.taylor_radius,
        n_directions=len(checks),
        holds_fraction=sum(c.holds for c in checks) / len(checks),
        max_ratio=max(ratios) if ratios else None,
        config=cfg.resolved(),
    )
    write_json(out / "taylor.json", report.model_dump())


ANALYSES = {
    "sign-split": _analyze_sign_split,
    "shift-hist": _analyze_shift,
    "similarity": _analyze_similarity,
    "taylor": _analyze_taylor,
}


def cmd_analyze(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    base, grouped = _load_run(out, args.adapters)
    n_trained = len(next(iter(grouped.values())))
    sequence = _sequence(cfg, n_trained)
    ANALYSES[args.analysis](cfg, base, grouped, sequence, out / "analysis", settings)
    return 0


def cmd_ablate(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    report = run_ablation(cfg, seeds, args.variants, settings)
    write_json(out / "ablation.json", report.model_dump())
    return 0


def cmd_export_data(cfg: ExperimentConfig, args: argparse.Namespace, settings: Settings) -> int:
    out = cfg.resolved_out_dir(settings) / "data"
    for task in _sequence(cfg):
        for split in ("train", "test"):
            export_csv(task, out / f"{task.name}_{split}.csv", split)
    LOGGER.info("Exported %d tasks to %s", cfg.n_tasks, out)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "export-data": cmd_export_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment document")
    common.add_argument("--seed", type=int, help="Training (and default data) seed")
    common.add_argument("--lambda", dest="lam", type=float, help="Stability loss weight")
    common.add_argument("--alpha", type=float, help="tanh sharpness of the stability loss")
    common.add_argument("--merge-strategy", choices=STRATEGIES, help="Adapter merging strategy")
    common.add_argument("--merge-cadence", choices=("final", "per-task"), help="Merge once at the end or after every task")
    common.add_argument("--order", help='Task order as "i,j,k,..." (1-based)')
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(prog="pslora", description="Continual adapter training lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="Fit and freeze the base model")
    train = sub.add_parser("train", parents=[common], help="Train adapters over the task sequence")
    train.add_argument("--dry-run", action="store_true", help="Print the resolved config and exit")
    for name, text in (("merge", "Merge adapters into dense weights"), ("eval", "Evaluate unmerged and merged models")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--adapters", help="Adapter checkpoint (default <out>/adapters.pslr)")
    metrics = sub.add_parser("metrics", parents=[common], help="Continual-learning metrics")
    metrics.add_argument("--runs", nargs="+", help="Accuracy-matrix JSON files (default <out>/accuracy_matrix.json)")
    metrics.add_argument("--fr-literal", action="store_true", help="Take each task's FR peak as a(i,i)")
    analyze = sub.add_parser("analyze", parents=[common], help="Diagnostics over trained adapters")
    analyze.add_argument("analysis", choices=sorted(ANALYSES))
    analyze.add_argument("--adapters", help="Adapter checkpoint (default <out>/adapters.pslr)")
    ablate = sub.add_parser("ablate", parents=[common], help="Paired-seed component ablation")
    ablate.add_argument("--seeds", type=int, default=5, help="Number of consecutive seeds")
    ablate.add_argument("--variants", nargs="+", help="Variants to run (default all)")
    sub.add_parser("export-data", parents=[common], help="Write each task as CSV")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    args = build_parser().parse_args(argv)
    _configure_logging(verbose=args.verbose, level_name=settings.log_level)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args, settings)
    except ValidationError as exc:
        LOGGER.error("invalid configuration: %s", exc)
    except PSLoraError as exc:
        LOGGER.error("%s", exc)
    except ValueError as exc:
        LOGGER.error("%s", exc)
    except OSError as exc:
        LOGGER.error("cannot access %s: %s", exc.filename or "output", exc.strerror or exc)
    return 1


if __name__ == "__main__":
    sys.exit(main())
