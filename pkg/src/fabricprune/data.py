"""Dataset handling: ingestion, synthetic generation, splits, augmentation.

Images are float32 arrays of shape (N, 3, R, R) with values in [0, 1]
before normalization. Splits are stratified so every subset keeps the
class proportions of the whole; all randomness is seeded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Malformed binary record file."""


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, R, R) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise ValueError("dataset must contain at least one item")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels misaligned")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> "ImageDataset":
        return ImageDataset(self.images[indices], self.labels[indices], self.class_names)


def stratified_split_indices(labels: np.ndarray, fractions, seed: int) -> list[np.ndarray]:
    """Per-class index lists for each fraction, remainder by largest fractional
    part (ties to the earlier split). Splits are disjoint; with fractions
    summing below 1 the leftover items simply go unused."""
    fractions = list(fractions)
    if any(f <= 0 for f in fractions):
        raise ValueError("all fractions must be positive")
    if sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, above 1")

    rng = np.random.default_rng(seed)
    splits: list[list[int]] = [[] for _ in fractions]
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        if members.size < len(fractions):
            raise ValueError(
                f"class {cls} has {members.size} items, fewer than {len(fractions)} splits")
        members = rng.permutation(members)

        targets = [f * members.size for f in fractions]
        counts = [math.floor(t) for t in targets]
        leftover = round(sum(targets)) - sum(counts)
        by_fractional_part = sorted(range(len(fractions)),
                                    key=lambda i: (-(targets[i] - counts[i]), i))
        for i in by_fractional_part[:leftover]:
            counts[i] += 1

        start = 0
        for split, count in zip(splits, counts):
            split.extend(members[start : start + count].tolist())
            start += count
    return [np.array(sorted(s), dtype=np.int64) for s in splits]


def stratified_split(dataset: ImageDataset, fractions, seed: int) -> list[ImageDataset]:
    """Split a dataset keeping the same class proportions in every part."""
    return [dataset.subset(idx)
            for idx in stratified_split_indices(dataset.labels, fractions, seed)]


def save_split_manifest(index_lists, path) -> None:
    """Plain-text sidecar: one `split_id item_index` pair per line."""
    with open(path, "w") as fh:
        for split_id, indices in enumerate(index_lists):
            for index in indices:
                fh.write(f"{split_id} {index}\n")


def load_split_manifest(path) -> list[np.ndarray]:
    split_map: dict[int, list[int]] = {}
    with open(path) as fh:
        for line in fh:
            split_id, index = line.split()
            split_map.setdefault(int(split_id), []).append(int(index))
    return [np.array(split_map[i], dtype=np.int64) for i in sorted(split_map)]


@dataclass
class AugmentConfig:
    normalize_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalize_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    resize: int = 32
    crop_size: int = 32
    crop_padding: int = 4
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.crop_size > self.resize:
            raise ValueError(f"crop {self.crop_size} larger than resize {self.resize}")


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image (align-corners-false sampling)."""
    C, H, W = image.shape
    if H == target and W == target:
        return image.copy()

    def axis_matrix(n_in, n_out):
        m = np.zeros((n_out, n_in), dtype=image.dtype)
        scale = n_in / n_out
        for i in range(n_out):
            src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            f = src - i0
            m[i, i0] += 1.0 - f
            m[i, i1] += f
        return m

    mh = axis_matrix(H, target)
    mw = axis_matrix(W, target)
    return np.einsum("ph,chw,qw->cpq", mh, image, mw, optimize=True)


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype)[:, None, None]
    std = np.asarray(std, dtype=image.dtype)[:, None, None]
    return (image - mean) / std


def denormalize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype)[:, None, None]
    std = np.asarray(std, dtype=image.dtype)[:, None, None]
    return image * std + mean


def augment(image: np.ndarray, config: AugmentConfig, seed) -> np.ndarray:
    """Seeded train-time transform: resize, random padded crop, random
    horizontal flip, normalize. Pure per-image function."""
    rng = np.random.default_rng(seed)
    out = resize_bilinear(image, config.resize)

    pad = config.crop_padding
    if pad > 0 or config.crop_size < config.resize:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
        span = padded.shape[1] - config.crop_size
        top = int(rng.integers(0, span + 1))
        left = int(rng.integers(0, span + 1))
        out = padded[:, top : top + config.crop_size, left : left + config.crop_size]

    if rng.random() < config.flip_prob:
        out = horizontal_flip(out)
    return normalize(out, config.normalize_mean, config.normalize_std)


def dominant_object_label(record) -> int | None:
    """Label of an annotated image by its dominant object, or None to discard.

    `record` lists (class label, bounding-box area) pairs. A single distinct
    class wins outright; otherwise the class with the largest summed area
    wins only if it covers at least twice the runner-up.
    """
    if not record:
        raise ValueError("empty annotation record")
    areas: dict[int, float] = {}
    for label, area in record:
        if area <= 0:
            raise ValueError(f"object area must be positive, got {area}")
        areas[label] = areas.get(label, 0.0) + float(area)
    if len(areas) == 1:
        return next(iter(areas))
    ranked = sorted(areas.items(), key=lambda kv: -kv[1])
    (top_label, top_area), (_, second_area) = ranked[0], ranked[1]
    return top_label if top_area >= 2.0 * second_area else None


@dataclass
class RecordLayout:
    """Fixed-size records: 1 label byte, then channel-major pixel bytes."""

    resolution: int
    channels: int = 3
    num_classes: int | None = None

    @property
    def record_size(self) -> int:
        return 1 + self.channels * self.resolution * self.resolution


def load_binary_records(path, layout: RecordLayout,
                        class_names: list[str] | None = None) -> ImageDataset:
    """Parse a file of fixed-size label+pixel records into a dataset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    size = layout.record_size
    if len(raw) == 0 or len(raw) % size != 0:
        expected = (len(raw) // size + 1) * size
        raise FormatError(
            f"{path}: file is {len(raw)} bytes, not a positive multiple of the "
            f"{size}-byte record (nearest would be {expected})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    labels = records[:, 0].astype(np.int64)
    if layout.num_classes is not None:
        bad = np.nonzero(labels >= layout.num_classes)[0]
        if bad.size:
            offset = int(bad[0]) * size
            raise FormatError(
                f"{path}: label {labels[bad[0]]} at byte offset {offset} is outside "
                f"[0, {layout.num_classes})")
    r = layout.resolution
    images = records[:, 1:].reshape(-1, layout.channels, r, r).astype(np.float32) / 255.0
    return ImageDataset(images, labels, class_names or [])


def save_binary_records(dataset: ImageDataset, path) -> None:
    """Inverse of load_binary_records (pixels quantized to bytes)."""
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        for label, img in zip(dataset.labels, pixels):
            fh.write(bytes([int(label)]))
            fh.write(img.tobytes())


_DIFFICULTY = {
    # (center jitter, pixel noise, color contrast)
    "easy": (0.04, 0.05, 0.48),
    "medium": (0.10, 0.16, 0.30),
    "hard": (0.16, 0.26, 0.20),
}


def make_synthetic(classes: int, n_per_class: int, resolution: int, seed: int = 0,
                   difficulty: str = "easy",
                   confusable_fraction: float = 0.0) -> ImageDataset:
    """Colored Gaussian blobs at class-specific positions, seeded and separable.

    Each class owns a position on a ring and a color; difficulty widens the
    position jitter and pixel noise until classes start to overlap.

    confusable_fraction carves out a subpopulation of each class whose items
    borrow the next class's position and half its color while keeping their
    own label: genuinely ambiguous items that an imperfect annotator will
    mislabel consistently, giving injected label noise a learnable structure.
    """
    if resolution < 2 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two, got {resolution}")
    if difficulty not in _DIFFICULTY:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    if not 0.0 <= confusable_fraction < 1.0:
        raise ValueError(f"confusable_fraction must be in [0, 1), got {confusable_fraction}")
    jitter, noise, contrast = _DIFFICULTY[difficulty]

    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = 0.5 + 0.28 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    phases = 2.0 * np.pi * np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    colors = 0.5 + contrast * np.cos(angles[:, None] + phases[None, :])

    grid = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    images = np.empty((classes * n_per_class, 3, resolution, resolution), dtype=np.float32)
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    row = 0
    for cls in range(classes):
        n_confusable = int(round(confusable_fraction * n_per_class))
        for item in range(n_per_class):
            if item < n_confusable:
                lookalike = (cls + 1) % classes
                center = centers[lookalike]
                color = 0.5 * (colors[cls] + colors[lookalike])
            else:
                center = centers[cls]
                color = colors[cls]
            cy, cx = center + jitter * rng.standard_normal(2)
            radius = 0.16 * (1.0 + 0.15 * rng.standard_normal())
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
            img = 0.12 + blob[None] * color[:, None, None] \
                + noise * rng.standard_normal((3, resolution, resolution))
            images[row] = np.clip(img, 0.0, 1.0)
            labels[row] = cls
            row += 1
    names = [f"class_{c}" for c in range(classes)]
    return ImageDataset(images, labels, names)
