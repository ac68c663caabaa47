"""Datasets, orientation transforms, batch modification and phase schedules.

Images are float32 arrays shaped ``C x H x W`` (batches ``N x C x H x W``)
with values in [0, 1]. Class ids inside a phase split are remapped to the
seen-so-far index space given by the schedule's class order.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

CIFAR_RECORD = 3074
CIFAR_SIDE = 32
CIFAR_CLASSES = 100


@dataclass(frozen=True)
class OrientationSet:
    """Ordered orientation classes in degrees; index 0 is always the unrotated image."""

    angles: tuple[float, ...]

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise ConfigError("an orientation set needs at least one angle")
        if angles[0] != 0:
            raise ConfigError("orientation class 0 must be the 0 degree angle")
        if len(set(angles)) != len(angles):
            raise ConfigError(f"duplicate angles in {angles}")
        if any(not 0 <= a < 360 for a in angles):
            raise ConfigError(f"angles must lie in [0, 360): {angles}")

    @classmethod
    def parse(cls, text: str) -> "OrientationSet":
        try:
            return cls(tuple(float(tok) for tok in text.replace(" ", "").split(",") if tok))
        except ValueError as exc:
            raise ConfigError(f"cannot parse orientation set {text!r}") from exc

    def __len__(self) -> int:
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)

    def index(self, angle: float) -> int:
        try:
            return self.angles.index(float(angle))
        except ValueError:
            raise ConfigError(f"angle {angle} is not among the orientation classes {self.angles}") from None

    def __str__(self) -> str:
        return ",".join(f"{a:g}" for a in self.angles)


@dataclass
class LabeledSample:
    image: np.ndarray
    image_class: int


@dataclass
class ImageSet:
    """Parallel arrays of images and integer labels.

    ``source_index`` records each row's position in the originating split so
    exemplars can be traced back to (and reloaded from) the dataset.
    """

    images: np.ndarray
    labels: np.ndarray
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError("images and labels differ in length")
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, mask_or_index) -> "ImageSet":
        idx = np.asarray(mask_or_index)
        return ImageSet(self.images[idx], self.labels[idx], self.source_index[idx])


@dataclass
class Dataset:
    train: ImageSet
    test: ImageSet
    class_count: int
    description: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.train)


# -- rotations -------------------------------------------------------------------


def rotate_quarter(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate the last two axes counter-clockwise by ``90*k`` degrees (exact)."""
    k = int(k) % 4
    if k == 0:
        return image.copy()
    if k % 2 and image.shape[-1] != image.shape[-2]:
        raise ShapeError(f"odd quarter turns need square images, got {image.shape[-2:]}")
    return np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))


def rotate_bilinear(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre with bilinear sampling.

    Samples that fall outside the source are filled with 0. Multiples of 90
    degrees are routed to :func:`rotate_quarter`.
    """
    angle = float(angle) % 360.0
    if angle % 90 == 0:
        return rotate_quarter(image, int(angle // 90))
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y, x = rows - cy, cols - cx
    src_y = cy + cos * y + sin * x
    src_x = cx - sin * y + cos * x
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = (src_y - y0).astype(image.dtype)
    wx = (src_x - x0).astype(image.dtype)
    out = np.zeros_like(image)
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = image[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, vals, 0) * (fy * fx)
    return out


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    return rotate_bilinear(image, angle)


class ModifiedBatch(NamedTuple):
    images: np.ndarray
    image_labels: np.ndarray
    orientation_labels: np.ndarray


def modify_batch(images: np.ndarray, labels, orientations: OrientationSet) -> ModifiedBatch:
    """Expand ``N`` samples to ``N*M`` (image class, orientation class) pairs.

    Ordering is sample-major: row ``i*M + j`` holds sample ``i`` rotated by
    ``orientations.angles[j]``. Orientation 0 rows are bit-identical copies.
    """
    if len(images) == 0:
        raise ShapeError("cannot modify an empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    m = len(orientations)
    views = np.stack([rotate(images, a) for a in orientations.angles], axis=1)
    n = len(images)
    return ModifiedBatch(
        views.reshape((n * m,) + images.shape[1:]),
        np.repeat(labels, m),
        np.tile(np.arange(m, dtype=np.int64), n),
    )


# -- loaders -----------------------------------------------------------------------


def load_cifar100(path, mean: Optional[Sequence[float]] = None, std: Optional[Sequence[float]] = None) -> ImageSet:
    """Read one CIFAR-100 binary file (``train.bin`` or ``test.bin``).

    Each 3074-byte record is coarse label, fine label, then 3072 channel-planar
    RGB bytes. The fine label becomes the class; pixels are scaled to [0, 1]
    and optionally normalized per channel.
    """
    try:
        raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw.size == 0:
        raise DataError(f"{path} is empty")
    if raw.size % CIFAR_RECORD:
        raise DataError(
            f"{path} is truncated: {raw.size} bytes is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 1].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise DataError(f"{path} contains fine labels >= {CIFAR_CLASSES}")
    images = records[:, 2:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / np.float32(255)
    if mean is not None or std is not None:
        mu = np.asarray(mean if mean is not None else (0, 0, 0), dtype=np.float32).reshape(1, 3, 1, 1)
        sd = np.asarray(std if std is not None else (1, 1, 1), dtype=np.float32).reshape(1, 3, 1, 1)
        images = (images - mu) / sd
    return ImageSet(images, labels)


def load_cifar100_dataset(directory, mean=None, std=None) -> Dataset:
    directory = os.fspath(directory)
    train = load_cifar100(os.path.join(directory, "train.bin"), mean, std)
    test = load_cifar100(os.path.join(directory, "test.bin"), mean, std)
    return Dataset(train, test, CIFAR_CLASSES, {"source": "cifar100", "path": directory})


def _render_class(rng, count, side, angle, freq, tint, noise):
    """Oriented grating on a top-lit ramp; phase, jitter and noise per sample."""
    r = np.arange(side, dtype=np.float64) - (side - 1) / 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    ramp = -yy / side  # brighter towards the top edge
    images = np.empty((count, len(tint), side, side), dtype=np.float32)
    for i in range(count):
        theta = math.radians(angle + rng.uniform(-4, 4))
        f = freq * rng.uniform(0.92, 1.08)
        phase = rng.uniform(0, 2 * math.pi)
        # stripes run along ``theta``; the wave varies across them
        proj = -math.sin(theta) * xx - math.cos(theta) * yy
        pattern = 0.5 + 0.28 * np.sin(2 * math.pi * f * proj / side + phase) + 0.35 * ramp
        for c, t in enumerate(tint):
            chan = pattern * t + noise * rng.standard_normal((side, side))
            images[i, c] = np.clip(chan, 0.0, 1.0)
    return images


def synth_oriented(
    seed: int,
    class_count: int,
    samples_per_class: int,
    side: int = 16,
    test_per_class: Optional[int] = None,
    channels: int = 3,
    noise: float = 0.3,
) -> Dataset:
    """Deterministic orientation-sensitive stand-in for a natural-image dataset.

    Class ``c`` is a grating whose stripe angle lies in [0, 90) degrees, with
    one of several spatial frequencies, over a brightness ramp that is lit
    from the top. A quarter turn therefore moves every class outside the
    angle range seen in unrotated training data, while the rotated images of
    distinct classes stay distinct from each other.
    """
    if side < 8:
        raise ConfigError("synthetic images need side >= 8")
    if class_count < 1 or samples_per_class < 1:
        raise ConfigError("class_count and samples_per_class must be positive")
    if test_per_class is None:
        test_per_class = max(1, samples_per_class // 2)
    rng = np.random.default_rng(seed)
    n_angles = min(class_count, 4)
    n_freqs = math.ceil(class_count / n_angles)
    freqs = np.linspace(2.0, 2.0 + 1.6 * (n_freqs - 1), n_freqs) if n_freqs > 1 else np.array([2.5])
    params = []
    for c in range(class_count):
        angle = (c % n_angles) * 90.0 / n_angles + rng.uniform(0, 90.0 / n_angles / 4)
        tint = rng.uniform(0.85, 1.0, size=channels)
        params.append((angle, float(freqs[c // n_angles]), tint))
    splits = []
    for per_class in (samples_per_class, test_per_class):
        images, labels = [], []
        for c, (angle, freq, tint) in enumerate(params):
            images.append(_render_class(rng, per_class, side, angle, freq, tint, noise))
            labels.append(np.full(per_class, c, dtype=np.int64))
        splits.append(ImageSet(np.concatenate(images), np.concatenate(labels)))
    desc = {
        "source": "synthetic",
        "seed": seed,
        "class_count": class_count,
        "samples_per_class": samples_per_class,
        "test_per_class": test_per_class,
        "side": side,
    }
    return Dataset(splits[0], splits[1], class_count, desc)


# -- phase protocol ------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseSchedule:
    class_order: tuple[int, ...]
    base_count: int
    phase_count: int
    increment: int

    @property
    def total(self) -> int:
        return len(self.class_order)

    def phase_classes(self, p: int) -> tuple[int, ...]:
        """Raw class ids introduced at phase ``p``."""
        self._check(p)
        if p == 0:
            return self.class_order[: self.base_count]
        start = self.base_count + (p - 1) * self.increment
        return self.class_order[start : start + self.increment]

    def seen_count(self, p: int) -> int:
        self._check(p)
        return self.base_count + p * self.increment

    def phase_sizes(self) -> list[int]:
        return [len(self.phase_classes(p)) for p in range(self.phase_count + 1)]

    def remap(self, raw_labels: np.ndarray) -> np.ndarray:
        position = np.empty(self.total, dtype=np.int64)
        position[list(self.class_order)] = np.arange(self.total)
        return position[np.asarray(raw_labels, dtype=np.int64)]

    def _check(self, p: int) -> None:
        if not 0 <= p <= self.phase_count:
            raise ConfigError(f"phase {p} outside [0, {self.phase_count}]")


def make_phase_schedule(total_classes: int, base_count: int, phase_count: int, seed: int) -> PhaseSchedule:
    if phase_count < 1 or not 0 < base_count < total_classes:
        raise ConfigError("need phase_count >= 1 and 0 < base_count < total_classes")
    rest = total_classes - base_count
    if rest % phase_count:
        raise ConfigError(
            f"{rest} incremental classes cannot be split evenly over {phase_count} phases"
        )
    order = np.random.default_rng(seed).permutation(total_classes)
    return PhaseSchedule(tuple(int(c) for c in order), base_count, phase_count, rest // phase_count)


def phase_data(dataset: Dataset, schedule: PhaseSchedule, p: int) -> tuple[ImageSet, ImageSet]:
    """Train split of phase ``p``'s new classes and test split of all seen classes."""
    new = np.asarray(schedule.phase_classes(p))
    seen = np.asarray(schedule.class_order[: schedule.seen_count(p)])
    train = dataset.train.subset(np.isin(dataset.train.labels, new))
    test = dataset.test.subset(np.isin(dataset.test.labels, seen))
    train.labels = schedule.remap(train.labels)
    test.labels = schedule.remap(test.labels)
    return train, test
