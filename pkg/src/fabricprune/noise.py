"""Structured label noise and the indicators that measure its effect.

Three corruption processes: uniformly random flips, class-dependent flips
through a row-stochastic transition matrix, and class-and-feature-dependent
relabeling by an artificial annotator (a small fabric classifier trained
until its held-out error lands near a target rate). Clean labels are always
preserved alongside the given ones, which is what makes the clean/noisy
fitting fractions computable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ImageDataset
from .fabric import Fabric, build_fabric, clone_parameters, restore_parameters
from .tensor import SGD, SgdConfig, backward, softmax_cross_entropy


@dataclass
class LabeledSet:
    """Images with both their true labels and the labels a model gets to see."""

    images: np.ndarray
    clean_labels: np.ndarray
    given_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.images.shape[0]
        if self.clean_labels.shape != (n,) or self.given_labels.shape != (n,):
            raise ValueError("labels misaligned with items")
        for labels in (self.clean_labels, self.given_labels):
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise ValueError(f"label outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_dataset(cls, dataset: ImageDataset) -> "LabeledSet":
        return cls(dataset.images, dataset.labels.copy(), dataset.labels.copy(),
                   dataset.num_classes)

    @property
    def noise_rate(self) -> float:
        return float((self.clean_labels != self.given_labels).mean())

    def subset(self, indices) -> "LabeledSet":
        return LabeledSet(self.images[indices], self.clean_labels[indices],
                          self.given_labels[indices], self.num_classes)


def apply_uniform_noise(labeled: LabeledSet, p: float, seed: int) -> LabeledSet:
    """Flip each label with probability p, uniformly into another class."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    if labeled.num_classes < 2 and p > 0.0:
        raise ValueError("cannot flip labels with fewer than 2 classes")
    given = labeled.clean_labels.copy()
    if p > 0.0:
        rng = np.random.default_rng(seed)
        n = len(labeled)
        flips = rng.random(n) < p
        offsets = rng.integers(1, labeled.num_classes, size=n)
        given[flips] = (given[flips] + offsets[flips]) % labeled.num_classes
    return LabeledSet(labeled.images, labeled.clean_labels.copy(), given,
                      labeled.num_classes)


def validate_transition_matrix(matrix: np.ndarray, num_classes: int) -> None:
    if matrix.shape != (num_classes, num_classes):
        raise ValueError(f"transition matrix must be {num_classes}x{num_classes}")
    if (matrix < 0).any():
        raise ValueError("transition probabilities must be nonnegative")
    sums = matrix.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError(f"rows must sum to 1, got {sums}")


def uniform_transition_matrix(num_classes: int, p: float) -> np.ndarray:
    """The matrix equivalent of uniform noise: 1-p diagonal, p spread evenly."""
    matrix = np.full((num_classes, num_classes), p / (num_classes - 1))
    np.fill_diagonal(matrix, 1.0 - p)
    return matrix


def pair_flip_matrix(num_classes: int, p: float) -> np.ndarray:
    """Each class leaks only into its successor (mod K) with probability p."""
    matrix = np.zeros((num_classes, num_classes))
    np.fill_diagonal(matrix, 1.0 - p)
    for cls in range(num_classes):
        matrix[cls, (cls + 1) % num_classes] += p
    return matrix


def apply_class_noise(labeled: LabeledSet, transition: np.ndarray, seed: int) -> LabeledSet:
    """Sample each given label from the transition row of its clean label."""
    transition = np.asarray(transition, dtype=np.float64)
    validate_transition_matrix(transition, labeled.num_classes)
    rng = np.random.default_rng(seed)
    cumulative = np.cumsum(transition[labeled.clean_labels], axis=1)
    draws = rng.random(len(labeled))
    given = (draws[:, None] >= cumulative).sum(axis=1)
    given = np.minimum(given, labeled.num_classes - 1).astype(labeled.clean_labels.dtype)
    return LabeledSet(labeled.images, labeled.clean_labels.copy(), given,
                      labeled.num_classes)


def classification_error(fabric: Fabric, images: np.ndarray, labels: np.ndarray) -> float:
    return float((fabric.predict(images) != labels).mean())


@dataclass
class AnnotatorConfig:
    """Architecture and recipe for the artificial annotator fabric.

    A deliberately small, slowly trained model: the held-out error has to
    drift through the target band rather than leap past it, and weight decay
    keeps the train split from being memorized (which would drag the
    relabeled set's mislabel fraction below the target).
    """

    layers: int = 3
    channels: int = 4
    learning_rate: float = 0.01
    weight_decay: float = 5e-3
    batch_size: int = 64
    max_epochs: int = 100
    tolerance: float = 0.01  # half-width of the acceptance band around epsilon
    seed: int = 0


@dataclass
class AnnotatorInfo:
    chosen_epoch: int
    holdout_error: float
    hit_band: bool
    error_curve: list[float] = field(default_factory=list)


def _sgd_epoch(fabric: Fabric, images, labels, optimizer: SGD, batch_size: int, rng) -> None:
    order = rng.permutation(images.shape[0])
    for start in range(0, order.size, batch_size):
        batch = order[start : start + batch_size]
        if batch.size < 2:
            continue  # train-mode batch norm needs at least 2 samples
        optimizer.zero_grad()
        logits = fabric.forward(images[batch], mode="train")
        backward(softmax_cross_entropy(logits, labels[batch]))
        optimizer.step()


def train_annotator(train_set: LabeledSet, holdout: LabeledSet, epsilon: float,
                    config: AnnotatorConfig) -> tuple[Fabric, AnnotatorInfo]:
    """Train a small fabric until its held-out error lands near epsilon.

    Evaluates before training (epoch 0) and after every epoch; stops at the
    first error inside [epsilon - tol, epsilon + tol]. If the band is never
    hit, the checkpoint whose error came closest to epsilon is returned,
    flagged via hit_band=False.
    """
    num_classes = train_set.num_classes
    if not 0.0 < epsilon < 1.0 - 1.0 / num_classes:
        raise ValueError(
            f"epsilon must be in (0, {1.0 - 1.0 / num_classes:.3f}) for {num_classes} classes")

    resolution = train_set.images.shape[2]
    scales = int(np.log2(resolution)) + 1
    fabric = build_fabric(config.layers, scales, config.channels, resolution,
                          num_classes, seed=config.seed)
    optimizer = SGD(fabric.parameters(),
                    SgdConfig(learning_rate=config.learning_rate,
                              weight_decay=config.weight_decay))
    rng = np.random.default_rng([config.seed, 1])

    curve: list[float] = []
    best_snapshot = None
    best_epoch = -1
    best_error = np.inf
    hit = False
    for epoch in range(config.max_epochs + 1):
        if epoch > 0:
            _sgd_epoch(fabric, train_set.images, train_set.given_labels, optimizer,
                       config.batch_size, rng)
        error = classification_error(fabric, holdout.images, holdout.given_labels)
        curve.append(error)
        if abs(error - epsilon) < abs(best_error - epsilon):
            best_error = error
            best_epoch = epoch
            best_snapshot = clone_parameters(fabric)
        if abs(error - epsilon) <= config.tolerance:
            hit = True
            break

    restore_parameters(fabric, best_snapshot)
    return fabric, AnnotatorInfo(chosen_epoch=best_epoch, holdout_error=best_error,
                                 hit_band=hit, error_curve=curve)


def relabel_with_annotator(labeled: LabeledSet, annotator: Fabric) -> LabeledSet:
    """Replace given labels with the annotator's predictions (pure inference)."""
    predictions = annotator.predict(labeled.images).astype(labeled.clean_labels.dtype)
    return LabeledSet(labeled.images, labeled.clean_labels.copy(), predictions,
                      labeled.num_classes)


@dataclass
class FittingReport:
    """How predictions relate to clean and noisy labels on one set.

    clean_fitting: among items whose given label is correct, the fraction
    predicted correctly. noisy_fitting: among mislabelled items, the fraction
    predicted with the wrong given label (how much noise a model absorbed).
    Fractions with an empty denominator are None, never 0.
    """

    clean_fitting: float | None
    noisy_fitting: float | None
    clean_count: int
    noisy_count: int

    def to_dict(self) -> dict:
        return {
            "clean_fitting": self.clean_fitting,
            "noisy_fitting": self.noisy_fitting,
            "clean_count": self.clean_count,
            "noisy_count": self.noisy_count,
        }


def fitting_report(predictions: np.ndarray, labeled: LabeledSet) -> FittingReport:
    predictions = np.asarray(predictions)
    if predictions.shape != labeled.clean_labels.shape:
        raise ValueError("predictions misaligned with the set")
    clean = labeled.clean_labels == labeled.given_labels
    noisy = ~clean
    clean_count = int(clean.sum())
    noisy_count = int(noisy.sum())
    clean_fitting = None
    noisy_fitting = None
    if clean_count:
        clean_fitting = float((predictions[clean] == labeled.clean_labels[clean]).mean())
    if noisy_count:
        noisy_fitting = float((predictions[noisy] == labeled.given_labels[noisy]).mean())
    return FittingReport(clean_fitting, noisy_fitting, clean_count, noisy_count)


def save_noisy_labels(labeled: LabeledSet, path) -> None:
    """Order-stable sidecar: one `index clean given` line per item."""
    with open(path, "w") as fh:
        for index in range(len(labeled)):
            fh.write(f"{index} {labeled.clean_labels[index]} {labeled.given_labels[index]}\n")


def load_noisy_labels(labeled: LabeledSet, path) -> LabeledSet:
    """Re-apply a saved noisy labeling to the same set (clean labels checked)."""
    given = labeled.given_labels.copy()
    with open(path) as fh:
        for line in fh:
            index, clean, noisy = (int(v) for v in line.split())
            if labeled.clean_labels[index] != clean:
                raise ValueError(
                    f"sidecar clean label {clean} at index {index} does not match "
                    f"the set ({labeled.clean_labels[index]})")
            given[index] = noisy
    return LabeledSet(labeled.images, labeled.clean_labels.copy(), given,
                      labeled.num_classes)
