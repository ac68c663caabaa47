"""Phase training: joint image/orientation objectives, distillation, replay memory.

Objective modes (selected by ``TrainConfig.objective``):

``dilf``
    image CE and orientation CE over every rotated copy, plus distillation
    on replay exemplars: ``L_img + L_frgt + gamma * L_or``.
``da``
    rotated copies used as plain augmentation: ``L_img + L_frgt``.
``ss``
    image CE on unrotated images only, orientation CE on all copies.
``plain``
    no rotation at all: image CE + distillation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .data import ImageSet, OrientationSet, PhaseSchedule, modify_batch
from .engine import (
    ParamGroup,
    Tensor,
    add,
    backward,
    lr_schedule,
    scale,
    sgd_step,
    soft_cross_entropy,
    softmax,
    softmax_cross_entropy,
    take_columns,
    take_rows,
)
from .errors import ConfigError
from .model import Model, ModelSnapshot

log = logging.getLogger(__name__)

OBJECTIVES = ("dilf", "da", "ss", "plain")


@dataclass
class TrainConfig:
    orientations: OrientationSet = field(default_factory=lambda: OrientationSet((0, 90)))
    objective: str = "dilf"
    gamma: float = 0.5
    temperature: float = 2.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step"
    milestones: tuple[int, ...] = (14,)
    lr_decay: float = 0.1
    memory_per_class: int = 20
    selection: str = "herding"
    distill_on_all: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        if self.memory_per_class < 0:
            raise ConfigError("memory_per_class must be nonnegative")
        if self.selection not in ("herding", "random"):
            raise ConfigError(f"unknown exemplar selection {self.selection!r}")
        if self.schedule not in ("step", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")

    def learning_rate_at(self, epoch: int) -> float:
        return lr_schedule(self.schedule, epoch, self.learning_rate, self.epochs, self.milestones, self.lr_decay)


# -- losses ---------------------------------------------------------------------------


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def loss_img(image_logits: Tensor, labels) -> Tensor:
    """Image-class CE averaged over all rotated copies of the batch."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= image_logits.shape[1]:
        raise ValueError(f"label {labels.max()} outside the {image_logits.shape[1]} seen classes")
    return softmax_cross_entropy(image_logits, labels)


def loss_or(orientation_logits: Tensor, orientation_labels) -> Tensor:
    """Orientation-class CE averaged over all rotated copies of the batch."""
    labels = np.asarray(orientation_labels)
    if labels.size and labels.max() >= orientation_logits.shape[1]:
        raise ValueError(f"orientation label {labels.max()} outside {orientation_logits.shape[1]} classes")
    return softmax_cross_entropy(orientation_logits, labels)


def loss_frgt(old_logits: Optional[Tensor], soft_targets: Optional[np.ndarray], temperature: float) -> Tensor:
    """Temperature distillation of the previous model's old-class outputs.

    ``old_logits`` are the current model's logits restricted to old classes,
    one row per replay exemplar; ``soft_targets`` the previous model's
    ``softmax(logits / T)`` on the same exemplars. Returns 0 with no rows.
    """
    if old_logits is None or soft_targets is None or len(soft_targets) == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    return soft_cross_entropy(old_logits, soft_targets, temperature)


def soft_targets_for(snapshot: ModelSnapshot, images: np.ndarray, temperature: float) -> np.ndarray:
    return softmax(snapshot.predict_logits(images).astype(np.float64) / temperature).astype(np.float32)


@dataclass
class Batch:
    """Original (unrotated) images; ``replay`` flags exemplar rows."""

    images: np.ndarray
    labels: np.ndarray
    replay: np.ndarray
    soft_targets: Optional[np.ndarray] = None  # one row per flagged sample

    @classmethod
    def fresh(cls, images, labels) -> "Batch":
        return cls(np.asarray(images, np.float32), np.asarray(labels, np.int64), np.zeros(len(labels), bool))


class LossTerms(NamedTuple):
    total: Tensor
    img: Tensor
    frgt: Tensor
    orient: Tensor
    image_logits: Tensor
    image_labels: np.ndarray


def _distill_rows(batch: Batch, config: TrainConfig) -> np.ndarray:
    return np.arange(len(batch.labels)) if config.distill_on_all else np.flatnonzero(batch.replay)


def compute_objective(
    model: Model, batch: Batch, snapshot: Optional[ModelSnapshot], config: TrainConfig, mode: str = "train"
) -> LossTerms:
    """Forward the batch once and assemble the configured objective."""
    objective = config.objective
    old = snapshot.class_count if snapshot is not None else 0
    rows = _distill_rows(batch, config) if old else np.zeros(0, np.intp)
    targets = None
    if len(rows):
        if batch.soft_targets is not None and not config.distill_on_all:
            targets = batch.soft_targets
        else:
            targets = soft_targets_for(snapshot, batch.images[rows], config.temperature)

    if objective == "plain":
        out = model.forward(batch.images, mode, with_orientation=False)
        img = loss_img(out.image_logits, batch.labels)
        frgt_rows = rows
        orient = _zero(img)
        image_labels = batch.labels
    else:
        m = len(config.orientations)
        if objective != "da" and model.orientation_count != m:
            raise ConfigError(f"model predicts {model.orientation_count} orientations, config lists {m}")
        mod = modify_batch(batch.images, batch.labels, config.orientations)
        out = model.forward(mod.images, mode, with_orientation=objective != "da")
        frgt_rows = rows * m  # orientation-0 copy of each distilled sample
        if objective == "ss":
            originals = np.arange(len(batch.labels)) * m
            img = loss_img(take_rows(out.image_logits, originals), batch.labels)
        else:
            img = loss_img(out.image_logits, mod.image_labels)
        orient = _zero(img) if objective == "da" else loss_or(out.orientation_logits, mod.orientation_labels)
        image_labels = mod.image_labels

    if len(frgt_rows):
        frgt = loss_frgt(take_columns(take_rows(out.image_logits, frgt_rows), old), targets, config.temperature)
    else:
        frgt = loss_frgt(None, None, config.temperature)

    total = add(img, frgt)
    if objective == "dilf":
        total = add(total, scale(orient, config.gamma))
    elif objective == "ss":
        total = add(total, orient)
    return LossTerms(total, img, frgt, orient, out.image_logits, image_labels)


def loss_total(model, batch, snapshot, config) -> Tensor:
    if config.objective != "dilf":
        raise ConfigError("loss_total is the dilf objective")
    return compute_objective(model, batch, snapshot, config).total


def loss_total_da(model, batch, snapshot, config) -> Tensor:
    if config.objective != "da":
        raise ConfigError("loss_total_da needs objective 'da'")
    return compute_objective(model, batch, snapshot, config).total


def loss_total_ss(model, batch, snapshot, config) -> Tensor:
    if config.objective != "ss":
        raise ConfigError("loss_total_ss needs objective 'ss'")
    return compute_objective(model, batch, snapshot, config).total


def trainable_parameters(model: Model, objective: str) -> list[Tensor]:
    """Orientation-head parameters are left out when the objective ignores them."""
    named = model.named_parameters()
    if objective in ("da", "plain"):
        return [t for k, t in named.items() if not k.startswith("orientation_head.")]
    return list(named.values())


# -- exemplars -----------------------------------------------------------------------


def select_exemplars(features: np.ndarray, m: int, mode: str = "herding", seed: int = 0) -> list[int]:
    """Pick up to ``m`` exemplar indices for one class.

    Herding greedily adds the sample that brings the running mean of the
    chosen set closest to the class mean (ties go to the lowest index).
    Random mode draws a seeded uniform subset.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    n = len(feats)
    if n == 0:
        raise ValueError("cannot select exemplars from an empty class")
    if m < 1:
        raise ValueError("m must be at least 1")
    k = min(m, n)
    if mode == "random":
        return sorted(np.random.default_rng(seed).choice(n, size=k, replace=False).tolist())
    if mode != "herding":
        raise ValueError(f"unknown selection mode {mode!r}")
    mu = feats.mean(axis=0)
    acc = np.zeros(feats.shape[1])
    taken = np.zeros(n, dtype=bool)
    chosen: list[int] = []
    for step in range(1, k + 1):
        diff = mu - (acc + feats) / step
        dist = np.zeros(n)
        for t in range(feats.shape[1]):  # fixed summation order
            dist += diff[:, t] * diff[:, t]
        dist[taken] = np.inf
        best = int(np.argmin(dist))
        chosen.append(best)
        taken[best] = True
        acc = acc + feats[best]
    return chosen


class ExemplarMemory:
    """Per-class store of original (never rotated) replay samples."""

    def __init__(self, capacity: int, selection: str = "herding"):
        if capacity < 0:
            raise ConfigError("memory capacity must be nonnegative")
        self.capacity = capacity
        self.selection = selection
        self._classes: dict[int, ImageSet] = {}

    def __len__(self) -> int:
        return sum(len(s) for s in self._classes.values())

    def classes(self) -> list[int]:
        return sorted(self._classes)

    def class_samples(self, cls: int) -> ImageSet:
        return self._classes[cls]

    def store(self, cls: int, samples: ImageSet) -> None:
        if len(samples) > self.capacity:
            raise ValueError(f"{len(samples)} samples exceed the capacity of {self.capacity}")
        self._classes[int(cls)] = samples

    def add_class(self, cls: int, samples: ImageSet, features: Optional[np.ndarray], seed: int = 0) -> None:
        if self.capacity == 0 or len(samples) == 0:
            self._classes[int(cls)] = samples.subset(np.zeros(0, dtype=np.intp))
            return
        if self.selection == "herding":
            idx = select_exemplars(features, self.capacity, "herding")
        else:
            idx = select_exemplars(np.zeros((len(samples), 1)), self.capacity, "random", seed=seed)
        self._classes[int(cls)] = samples.subset(np.asarray(idx, dtype=np.intp))

    def as_imageset(self) -> Optional[ImageSet]:
        if not self._classes:
            return None
        parts = [self._classes[c] for c in self.classes()]
        return ImageSet(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.source_index for p in parts]),
        )


# -- phase loop ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    learning_rate: float
    loss_img: float
    loss_frgt: float
    loss_or: float
    loss_total: float
    train_accuracy: float


@dataclass
class PhaseResult:
    snapshot: ModelSnapshot
    epochs: list[EpochRecord]


def train_phase(
    model: Model,
    memory: ExemplarMemory,
    train_set: ImageSet,
    schedule: PhaseSchedule,
    phase: int,
    snapshot: Optional[ModelSnapshot],
    config: TrainConfig,
    seed: int,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> PhaseResult:
    """Train one phase, then refresh the exemplar memory and snapshot the model.

    Each epoch shuffles the union of the phase's new samples and all stored
    exemplars; each batch is rotated, forwarded once and optimized with the
    configured objective.
    """
    seen = schedule.seen_count(phase)
    if phase > 0 and snapshot is None:
        raise ConfigError(f"phase {phase} needs the snapshot of phase {phase - 1}")
    if phase == 0 and model.class_count != seen:
        raise ConfigError(f"model has {model.class_count} outputs, phase 0 has {seen} classes")
    if model.class_count < seen:
        model.expand_image_head(seen - model.class_count)
    if model.class_count != seen:
        raise ConfigError(f"model has {model.class_count} outputs but {seen} classes are seen at phase {phase}")
    new_classes = set(range(schedule.seen_count(phase - 1) if phase else 0, seen))
    if not set(np.unique(train_set.labels).tolist()) <= new_classes:
        raise ConfigError(f"phase {phase} training data contains classes outside {sorted(new_classes)}")

    replay = memory.as_imageset() if phase > 0 else None
    images, labels = train_set.images, train_set.labels
    is_replay = np.zeros(len(labels), dtype=bool)
    replay_targets = np.zeros((len(labels), snapshot.class_count if snapshot else 0), np.float32)
    if replay is not None and len(replay):
        images = np.concatenate([images, replay.images])
        labels = np.concatenate([labels, replay.labels])
        is_replay = np.concatenate([is_replay, np.ones(len(replay), dtype=bool)])
        targets = soft_targets_for(snapshot, replay.images, config.temperature)
        replay_targets = np.concatenate([replay_targets, targets])

    group = ParamGroup(
        trainable_parameters(model, config.objective),
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    records = []
    n = len(labels)
    for epoch in range(config.epochs):
        group.learning_rate = config.learning_rate_at(epoch)
        order = np.random.default_rng([seed, phase, epoch]).permutation(n)
        sums = np.zeros(4)
        correct = seen_rows = batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            flags = is_replay[idx]
            batch = Batch(images[idx], labels[idx], flags, replay_targets[idx][flags])
            terms = compute_objective(model, batch, snapshot, config)
            backward(terms.total)
            sgd_step(group)
            group.zero_grad()
            sums += [terms.img.item(), terms.frgt.item(), terms.orient.item(), terms.total.item()]
            correct += int((terms.image_logits.data.argmax(axis=1) == terms.image_labels).sum())
            seen_rows += len(terms.image_labels)
            batches += 1
        means = sums / max(batches, 1)
        record = EpochRecord(
            phase, epoch, group.learning_rate, *means.tolist(), correct / max(seen_rows, 1)
        )
        records.append(record)
        log.debug("phase %d epoch %d: %s", phase, epoch, record)
        if on_epoch is not None:
            on_epoch(record)

    for cls in sorted(new_classes):
        members = train_set.subset(train_set.labels == cls)
        feats = model.embed(members.images) if memory.selection == "herding" and len(members) else None
        memory.add_class(cls, members, feats, seed=[seed, phase, cls])
    return PhaseResult(model.snapshot(), records)
