"""Experiment orchestration: the training loop, schedules, and artifacts.

A run takes one ExperimentConfig and produces a directory containing the
config copy and its hash, split manifests, append-only JSON-lines metrics,
pruning event reports, a DOT diagram, a checkpoint, and (when noise is
configured) a fitting report. Reruns of the same config and seed reproduce
metrics.jsonl byte for byte; wall-clock timings go to a separate sidecar
so they cannot break that.

Epoch bookkeeping is 1-based. Learning-rate milestones and pruning-event
epochs are expressed on the canonical 200-epoch recipe (drop the rate
tenfold after epochs 80 and 120; prune at 5/75/every 10 from 5 to 75) and
are rescaled proportionally when a run uses a different epoch budget.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    AugmentConfig,
    ImageDataset,
    RecordLayout,
    augment,
    load_binary_records,
    make_synthetic,
    save_split_manifest,
    stratified_split_indices,
)
from .fabric import (
    Fabric,
    build_fabric,
    export_dot,
    param_breakdown,
    save_fabric,
)
from .noise import (
    AnnotatorConfig,
    LabeledSet,
    apply_class_noise,
    apply_uniform_noise,
    classification_error,
    fitting_report,
    relabel_with_annotator,
    save_noisy_labels,
    train_annotator,
    uniform_transition_matrix,
)
from .pruning import (
    Criterion,
    Strategy,
    apply_event,
    build_plan,
    reported_param_count,
    rescale_plan,
    sensitivity_grads,
)
from .tensor import SGD, SgdConfig, backward, softmax_cross_entropy

RECIPE_EPOCHS = 200
RECIPE_LR_MILESTONES = (80, 120)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run is aborted with a diagnostic."""


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | binary
    classes: int = 3
    n_per_class: int = 150
    resolution: int = 16
    difficulty: str = "easy"
    confusable_fraction: float = 0.0
    path: str | None = None  # binary record file for kind="binary"
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class PruneConfig:
    strategy: str = "iterative"  # early | late | iterative
    sparsity: float = 0.05
    criterion: str = "magnitude"  # magnitude | sensitivity
    gradient_source: str = "validation"  # validation | test | train
    count_cascade: bool = True


@dataclass
class NoiseConfig:
    kind: str = "uniform"  # uniform | class | annotator
    rate: float = 0.1  # flip probability for uniform / symmetric class noise
    epsilon: float = 0.1  # target annotator error for kind="annotator"
    seed: int = 0
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    # fraction of the training split the annotator itself trains on; below 1
    # most of the relabeled data is unseen by it, pulling the realized
    # mislabel fraction toward its held-out error
    annotator_train_fraction: float = 1.0


@dataclass
class ExperimentConfig:
    layers: int = 4
    channels: int = 8
    input_resolution: int = 16
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_milestones: list[int] | None = None  # None: recipe milestones, rescaled
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    prune: PruneConfig | None = None
    noise: NoiseConfig | None = None
    augment: AugmentConfig | None = None
    out_dir: str = "runs/experiment"

    @property
    def scales(self) -> int:
        return int(math.log2(self.input_resolution)) + 1

    def resolved_milestones(self) -> list[int]:
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        return rescale_epochs(RECIPE_LR_MILESTONES, RECIPE_EPOCHS, self.epochs)

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "data" in raw and raw["data"] is not None:
            raw["data"] = DataConfig(**raw["data"])
        if raw.get("prune") is not None:
            raw["prune"] = PruneConfig(**raw["prune"])
        if raw.get("noise") is not None:
            noise_raw = dict(raw["noise"])
            if noise_raw.get("annotator") is not None:
                noise_raw["annotator"] = AnnotatorConfig(**noise_raw["annotator"])
            raw["noise"] = NoiseConfig(**noise_raw)
        if raw.get("augment") is not None:
            aug = dict(raw["augment"])
            for key in ("normalize_mean", "normalize_std"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            raw["augment"] = AugmentConfig(**aug)
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_error: float
    test_error: float
    learning_rate: float
    alive_links: int
    live_params: int
    reported_params: int
    wall_time: float  # kept out of metrics.jsonl so reruns stay byte-identical

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_error": self.val_error,
            "test_error": self.test_error,
            "learning_rate": self.learning_rate,
            "alive_links": self.alive_links,
            "live_params": self.live_params,
            "reported_params": self.reported_params,
        })


def lr_at(epoch: int, base_lr: float, milestones) -> float:
    """Learning rate for an epoch: divided by 10 after each passed milestone."""
    passed = sum(1 for m in milestones if epoch > m)
    return base_lr / (10.0 ** passed)


def rescale_epochs(values, old_total: int, new_total: int) -> list[int]:
    """Proportional epoch mapping, round half up, floored at epoch 1."""
    factor = new_total / old_total
    return [max(1, math.floor(v * factor + 0.5)) for v in values]


def scale_schedule(config: ExperimentConfig, total_epochs: int) -> ExperimentConfig:
    """Adapt a config to a new epoch budget, rescaling its lr milestones.

    Pruning-event epochs are rescaled at plan time by the same rule, with
    colliding events merged (and warned about) by rescale_plan.
    """
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    milestones = rescale_epochs(config.resolved_milestones(), config.epochs, total_epochs)
    return replace(config, epochs=total_epochs, lr_milestones=milestones)


def load_experiment_dataset(data: DataConfig) -> ImageDataset:
    if data.kind == "synthetic":
        return make_synthetic(data.classes, data.n_per_class, data.resolution,
                              seed=data.seed, difficulty=data.difficulty,
                              confusable_fraction=data.confusable_fraction)
    if data.kind == "binary":
        if data.path is None:
            raise ValueError("binary dataset needs a path")
        layout = RecordLayout(resolution=data.resolution, num_classes=data.classes)
        return load_binary_records(data.path, layout)
    raise ValueError(f"unknown dataset kind {data.kind!r}")


def _inject_noise(full: LabeledSet, train_idx, val_idx, config: NoiseConfig,
                  out_dir: Path | None):
    """Corrupt the given labels of the whole dataset, pre-split."""
    info: dict = {"kind": config.kind}
    if config.kind == "uniform":
        noisy = apply_uniform_noise(full, config.rate, config.seed)
        info["target_rate"] = config.rate
    elif config.kind == "class":
        matrix = uniform_transition_matrix(full.num_classes, config.rate)
        noisy = apply_class_noise(full, matrix, config.seed)
        info["target_rate"] = config.rate
    elif config.kind == "annotator":
        ann_train_idx = train_idx
        if config.annotator_train_fraction < 1.0:
            keep = max(2, int(round(config.annotator_train_fraction * len(train_idx))))
            picked = np.random.default_rng([config.seed, 7]).choice(
                len(train_idx), size=keep, replace=False)
            ann_train_idx = train_idx[np.sort(picked)]
        annotator, ann_info = train_annotator(full.subset(ann_train_idx),
                                              full.subset(val_idx),
                                              config.epsilon, config.annotator)
        noisy = relabel_with_annotator(full, annotator)
        info["target_rate"] = config.epsilon
        info["annotator_epoch"] = ann_info.chosen_epoch
        info["annotator_holdout_error"] = ann_info.holdout_error
        info["annotator_hit_band"] = ann_info.hit_band
    else:
        raise ValueError(f"unknown noise kind {config.kind!r}")
    info["realized_rate"] = noisy.noise_rate
    if out_dir is not None:
        save_noisy_labels(noisy, out_dir / "noisy_labels.txt")
    return noisy, info


def _augmented_batch(images: np.ndarray, config: AugmentConfig | None,
                     seed_tuple) -> np.ndarray:
    if config is None:
        return images
    return np.stack([
        augment(images[i], config, seed=list(seed_tuple) + [i])
        for i in range(images.shape[0])
    ]).astype(images.dtype)


def run_experiment(config: ExperimentConfig) -> dict:
    """Train (and optionally prune) one fabric end to end; returns a summary."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    (out / "config.hash").write_text(config.hash() + "\n")

    dataset = load_experiment_dataset(config.data)
    fractions = (config.data.train_fraction, config.data.val_fraction,
                 config.data.test_fraction)
    train_idx, val_idx, test_idx = stratified_split_indices(
        dataset.labels, fractions, config.data.seed)
    save_split_manifest([train_idx, val_idx, test_idx], out / "splits.txt")

    full = LabeledSet.from_dataset(dataset)
    noise_info = None
    if config.noise is not None:
        full, noise_info = _inject_noise(full, train_idx, val_idx, config.noise, out)
    train_set = full.subset(train_idx)
    val_set = full.subset(val_idx)
    test_set = full.subset(test_idx)

    fabric = build_fabric(config.layers, config.scales, config.channels,
                          config.input_resolution, dataset.num_classes,
                          seed=config.seed)
    full_counts = param_breakdown(config.layers, config.scales, config.channels,
                                  dataset.num_classes)

    plan = None
    events_by_epoch = {}
    if config.prune is not None:
        plan = build_plan(Strategy(config.prune.strategy), config.prune.sparsity, fabric)
        plan = rescale_plan(plan, RECIPE_EPOCHS, config.epochs)
        events_by_epoch = {event.epoch: event for event in plan.events}

    optimizer = SGD(fabric.parameters(),
                    SgdConfig(config.learning_rate, config.momentum, config.weight_decay))
    milestones = config.resolved_milestones()
    criterion = Criterion(config.prune.criterion) if config.prune else None

    def current_reported() -> int:
        if plan is not None:
            return reported_param_count(full_counts, plan.sparsity)
        return full_counts.total

    metrics_file = open(out / "metrics.jsonl", "w")
    timings_file = open(out / "timings.jsonl", "w")
    prune_file = open(out / "prune_events.jsonl", "w")
    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            lr = lr_at(epoch, config.learning_rate, milestones)
            optimizer.config = replace(optimizer.config, learning_rate=lr)

            order = np.random.default_rng([config.seed, 101, epoch]).permutation(
                len(train_set))
            losses = []
            for batch_index, start in enumerate(range(0, order.size, config.batch_size)):
                batch = order[start : start + config.batch_size]
                if batch.size < 2:
                    continue  # train-mode batch norm needs >= 2 samples
                images = _augmented_batch(train_set.images[batch], config.augment,
                                          (config.seed, 202, epoch, batch_index))
                optimizer.zero_grad()
                logits = fabric.forward(images, mode="train")
                loss = softmax_cross_entropy(logits, train_set.given_labels[batch])
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at epoch {epoch}, "
                        f"batch {batch_index} (lr={lr})")
                backward(loss)
                optimizer.step()
                losses.append(loss_value)

            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else 0.0,
                val_error=classification_error(fabric, val_set.images,
                                               val_set.given_labels),
                test_error=classification_error(fabric, test_set.images,
                                                test_set.clean_labels),
                learning_rate=lr,
                alive_links=len(fabric.alive_links()),
                live_params=fabric.live_param_count(),
                reported_params=current_reported(),
                wall_time=time.perf_counter() - started,
            )
            metrics_file.write(record.to_json() + "\n")
            timings_file.write(json.dumps({"epoch": epoch,
                                           "wall_time": record.wall_time}) + "\n")

            event = events_by_epoch.get(epoch)
            if event is not None:
                weight_scores = None
                if criterion is Criterion.SENSITIVITY:
                    source = {"validation": val_set, "test": test_set,
                              "train": train_set}[config.prune.gradient_source]
                    batches = _batched(source, config.batch_size)
                    weight_scores = sensitivity_grads(fabric, batches)
                report = apply_event(fabric, event, criterion, weight_scores,
                                     count_cascade=config.prune.count_cascade,
                                     final_sparsity=plan.sparsity)
                prune_file.write(report.to_json() + "\n")
                if report.link_shortfall or report.weight_shortfall:
                    warnings.warn(
                        f"pruning quota shortfall at epoch {epoch}: "
                        f"links {report.link_shortfall}, weights {report.weight_shortfall}")
                optimizer.params = fabric.parameters()
    finally:
        metrics_file.close()
        timings_file.close()
        prune_file.close()

    save_fabric(fabric, out / "fabric.npz")
    (out / "fabric.dot").write_text(export_dot(fabric))

    summary = {
        "config_hash": config.hash(),
        "epochs": config.epochs,
        "final_val_error": classification_error(fabric, val_set.images,
                                                val_set.given_labels),
        "final_test_error": classification_error(fabric, test_set.images,
                                                 test_set.clean_labels),
        "alive_links": len(fabric.alive_links()),
        "live_params": fabric.live_param_count(),
        "reported_params": current_reported(),
        "param_total_baseline": full_counts.total,
    }
    if noise_info is not None:
        predictions = fabric.predict(test_set.images)
        report = fitting_report(predictions, test_set)
        summary["noise"] = noise_info
        summary["fitting"] = report.to_dict()
        (out / "fitting.json").write_text(json.dumps(summary["fitting"], indent=2))
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    return summary


def _batched(labeled: LabeledSet, batch_size: int):
    batches = []
    for start in range(0, len(labeled), batch_size):
        images = labeled.images[start : start + batch_size]
        labels = labeled.given_labels[start : start + batch_size]
        if images.shape[0] >= 2:
            batches.append((images, labels))
    return batches


def evaluate_checkpoint(fabric: Fabric, config: ExperimentConfig,
                        split: str = "test") -> dict:
    """Error of a checkpointed fabric on one split of the config's dataset."""
    dataset = load_experiment_dataset(config.data)
    fractions = (config.data.train_fraction, config.data.val_fraction,
                 config.data.test_fraction)
    indices = stratified_split_indices(dataset.labels, fractions, config.data.seed)
    chosen = {"train": 0, "validation": 1, "test": 2}[split]
    subset = dataset.subset(indices[chosen])
    error = classification_error(fabric, subset.images, subset.labels)
    return {"split": split, "items": len(subset), "error": error}
