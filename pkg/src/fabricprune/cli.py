"""Command-line front end. Consumers are scripts; all output is JSON or DOT."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import stratified_split_indices
from .fabric import build_fabric, export_dot, load_fabric, param_breakdown
from .noise import LabeledSet, fitting_report, load_noisy_labels
from .pruning import Strategy, build_plan, reported_param_count
from .runner import (
    ExperimentConfig,
    NoiseConfig,
    PruneConfig,
    evaluate_checkpoint,
    load_experiment_dataset,
    run_experiment,
    _inject_noise,
)


def _load_config(path: str) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.out is not None:
        config.out_dir = args.out
    if args.sparsity is not None or args.strategy is not None or args.criterion is not None:
        prune = config.prune or PruneConfig()
        if args.sparsity is not None:
            prune.sparsity = args.sparsity
        if args.strategy is not None:
            prune.strategy = args.strategy
        if args.criterion is not None:
            prune.criterion = args.criterion
        config.prune = prune
    if args.noise is not None:
        if args.noise == "none":
            config.noise = None
        else:
            noise = config.noise or NoiseConfig()
            noise.kind = args.noise
            config.noise = noise
    return config


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    summary = run_experiment(config)
    _emit(summary)
    return 0


def cmd_prune_plan(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    if config.prune is None:
        print("config has no prune section", file=sys.stderr)
        return 2
    fabric = build_fabric(config.layers, config.scales, config.channels,
                          config.input_resolution, config.data.classes,
                          seed=config.seed)
    plan = build_plan(Strategy(config.prune.strategy), config.prune.sparsity, fabric)
    full = param_breakdown(config.layers, config.scales, config.channels,
                           config.data.classes)
    _emit({
        "strategy": plan.strategy.value,
        "sparsity": plan.sparsity,
        "total_links": plan.budget.total_links,
        "links_kept": plan.budget.links_kept,
        "min_links_kept": plan.budget.min_links_kept,
        "links_to_remove": plan.budget.links_to_remove,
        "weights_to_remove": plan.budget.weights_to_remove,
        "events": [{"epoch": e.epoch, "links": e.links_to_remove,
                    "weights": e.weights_to_remove} for e in plan.events],
        "baseline_params": full.total,
        "reported_params": reported_param_count(full, plan.sparsity),
    })
    return 0


def cmd_count_params(args) -> int:
    if args.config:
        config = _load_config(args.config)
        layers, channels = config.layers, config.channels
        resolution, classes = config.input_resolution, config.data.classes
    else:
        layers, channels = args.layers, args.channels
        resolution, classes = args.resolution, args.classes
    scales = int(np.log2(resolution)) + 1
    breakdown = param_breakdown(layers, scales, channels, classes)
    _emit({
        "layers": layers,
        "scales": scales,
        "channels": channels,
        "input_resolution": resolution,
        "classes": classes,
        "stem": breakdown.stem,
        "links": breakdown.links,
        "head": breakdown.head,
        "total": breakdown.total,
    })
    return 0


def cmd_export_dot(args) -> int:
    fabric = load_fabric(args.checkpoint)
    text = export_dot(fabric, include_pruned=args.include_pruned)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_inject_noise(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    if config.noise is None:
        print("config has no noise section", file=sys.stderr)
        return 2
    dataset = load_experiment_dataset(config.data)
    fractions = (config.data.train_fraction, config.data.val_fraction,
                 config.data.test_fraction)
    train_idx, val_idx, _ = stratified_split_indices(dataset.labels, fractions,
                                                     config.data.seed)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _, info = _inject_noise(LabeledSet.from_dataset(dataset), train_idx, val_idx,
                            config.noise, out_dir)
    _emit(info)
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    fabric = load_fabric(args.checkpoint)
    _emit(evaluate_checkpoint(fabric, config, split=args.split))
    return 0


def cmd_fitting_report(args) -> int:
    config = _load_config(args.config)
    fabric = load_fabric(args.checkpoint)
    dataset = load_experiment_dataset(config.data)
    fractions = (config.data.train_fraction, config.data.val_fraction,
                 config.data.test_fraction)
    _, _, test_idx = stratified_split_indices(dataset.labels, fractions,
                                              config.data.seed)
    full = load_noisy_labels(LabeledSet.from_dataset(dataset), args.labels)
    test_set = full.subset(test_idx)
    predictions = fabric.predict(test_set.images)
    _emit(fitting_report(predictions, test_set).to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fabricprune",
        description="Train, prune, and probe convolutional network fabrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--sparsity", type=float, default=None)
        p.add_argument("--strategy", choices=["early", "iterative", "late"], default=None)
        p.add_argument("--criterion", choices=["magnitude", "sensitivity"], default=None)
        p.add_argument("--noise", choices=["none", "uniform", "class", "annotator"],
                       default=None)
        p.add_argument("--out", default=None)

    train = sub.add_parser("train", help="run an experiment end to end")
    add_common(train)
    train.set_defaults(handler=cmd_train)

    plan = sub.add_parser("prune-plan", help="print the pruning schedule (dry run)")
    add_common(plan)
    plan.set_defaults(handler=cmd_prune_plan)

    count = sub.add_parser("count-params", help="parameter accounting for a fabric")
    count.add_argument("--config", default=None)
    count.add_argument("--layers", type=int, default=8)
    count.add_argument("--channels", type=int, default=64)
    count.add_argument("--resolution", type=int, default=32)
    count.add_argument("--classes", type=int, default=10)
    count.set_defaults(handler=cmd_count_params)

    dot = sub.add_parser("export-dot", help="render a checkpoint as a DOT digraph")
    dot.add_argument("--checkpoint", required=True)
    dot.add_argument("--out", default=None)
    dot.add_argument("--include-pruned", action="store_true")
    dot.set_defaults(handler=cmd_export_dot)

    inject = sub.add_parser("inject-noise", help="write a noisy-label sidecar")
    add_common(inject)
    inject.set_defaults(handler=cmd_inject_noise)

    evaluate = sub.add_parser("evaluate", help="error of a checkpoint on a split")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", choices=["train", "validation", "test"],
                          default="test")
    evaluate.set_defaults(handler=cmd_evaluate)

    fitting = sub.add_parser("fitting-report", help="clean/noisy fitting of a checkpoint")
    fitting.add_argument("--config", required=True)
    fitting.add_argument("--checkpoint", required=True)
    fitting.add_argument("--labels", required=True, help="noisy-label sidecar")
    fitting.set_defaults(handler=cmd_fitting_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
