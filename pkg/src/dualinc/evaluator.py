"""Rotation-ensemble inference, incremental accuracy, agreement counts, Grad-CAM.

Any object with ``predict_logits(images) -> N x K`` can be evaluated; Grad-CAM
additionally needs ``features(images, mode)`` and ``image_logits(features)``.
"""
from __future__ import annotations

import csv
import os
import re
import warnings
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .data import ImageSet, OrientationSet, rotate
from .engine import Tensor, backward, mul, no_grad, softmax, sum_all
from .errors import ConfigError, DataError

STRATEGIES = ("avg", "mode", "max", "none")
PLAIN_ENSEMBLE_LABEL = "EN-without-DILF"


class DegenerateEnsembleWarning(UserWarning):
    """An ensemble strategy was requested with a single orientation."""


def resolve_strategy(strategy: str, orientation_count: int) -> str:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown ensemble strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy != "none" and orientation_count == 1:
        warnings.warn(
            f"strategy {strategy!r} with a single orientation is plain single-view prediction",
            DegenerateEnsembleWarning,
            stacklevel=3,
        )
        return "none"
    return strategy


def orientation_views(images: np.ndarray, orientations: OrientationSet) -> list[np.ndarray]:
    return [images if a == 0 else rotate(images, a) for a in orientations]


def predict_probs(model, images, orientations: OrientationSet, batch_size: int = 256) -> np.ndarray:
    """Softmax image-class probabilities per orientation, shape ``M x N x K``."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return np.stack(
        [softmax(np.asarray(model.predict_logits(v), np.float64)) for v in orientation_views(images, orientations)]
    )


def combine(probs: np.ndarray, strategy: str) -> np.ndarray:
    """Class decision per sample from ``M x N x K`` per-orientation probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[:, None, :]
    if strategy == "none":
        return probs[0].argmax(axis=1)
    if strategy == "avg":
        return probs.mean(axis=0).argmax(axis=1)
    if strategy == "max":
        return probs.max(axis=0).argmax(axis=1)
    if strategy == "mode":
        k = probs.shape[2]
        votes = np.zeros(probs.shape[1:], dtype=np.int64)
        for view in probs:
            votes += np.eye(k, dtype=np.int64)[view.argmax(axis=1)]
        mean = probs.mean(axis=0)
        # most votes, then highest mean probability, then lowest index
        return np.where(votes == votes.max(axis=1, keepdims=True), mean, -np.inf).argmax(axis=1)
    raise ConfigError(f"unknown ensemble strategy {strategy!r}")


class EnsemblePrediction(NamedTuple):
    classes: np.ndarray  # N
    mean_probs: np.ndarray  # N x K
    per_orientation: np.ndarray  # M x N x K


def predict_ensemble(model, images, orientations: OrientationSet, strategy: str = "avg") -> EnsemblePrediction:
    strategy = resolve_strategy(strategy, len(orientations))
    probs = predict_probs(model, images, orientations)
    return EnsemblePrediction(combine(probs, strategy), probs.mean(axis=0), probs)


def evaluate(model, split: ImageSet, orientations: OrientationSet, strategy: str = "avg") -> float:
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    pred = predict_ensemble(model, split.images, orientations, strategy).classes
    return float(np.mean(pred == split.labels))


def average_incremental_accuracy(accuracies: Sequence[float]) -> float:
    if len(accuracies) == 0:
        raise ValueError("need at least one phase accuracy")
    return float(np.mean(np.asarray(accuracies, dtype=np.float64)))


# -- agreement ---------------------------------------------------------------------


@dataclass(frozen=True)
class AgreementTable:
    correct_o1: int
    correct_o2: int
    correct_both: int
    correct_o1_only: int
    correct_o2_only: int
    correct_en: int
    correct_en_and_both: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[int]:
        return [getattr(self, c) for c in self.columns()]


def agreement_counts(p1: np.ndarray, p2: np.ndarray, ensemble_pred: np.ndarray, labels) -> AgreementTable:
    """Count correct predictions at two orientations and for the ensemble."""
    labels = np.asarray(labels)
    c1 = np.asarray(p1).argmax(axis=1) == labels
    c2 = np.asarray(p2).argmax(axis=1) == labels
    ce = np.asarray(ensemble_pred) == labels
    return AgreementTable(
        int(c1.sum()),
        int(c2.sum()),
        int((c1 & c2).sum()),
        int((c1 & ~c2).sum()),
        int((~c1 & c2).sum()),
        int(ce.sum()),
        int((ce & c1 & c2).sum()),
    )


def agreement_analysis(
    model, split: ImageSet, orientations: OrientationSet, o1: float, o2: float, strategy: str = "avg"
) -> AgreementTable:
    """Correctness at orientations ``o1`` and ``o2`` versus the ensemble over ``orientations``."""
    if o1 == o2:
        raise ConfigError("agreement analysis needs two distinct orientations")
    for angle in (o1, o2):
        if float(angle) not in orientations.angles:
            raise ConfigError(f"orientation {angle} is not in the model's set {orientations}")
    if len(split) == 0:
        raise DataError("cannot analyze an empty split")
    pred = predict_ensemble(model, split.images, orientations, strategy)
    i1, i2 = orientations.index(o1), orientations.index(o2)
    return agreement_counts(pred.per_orientation[i1], pred.per_orientation[i2], pred.classes, split.labels)


# -- Grad-CAM --------------------------------------------------------------------------


def normalize_heatmap(h: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant positive map becomes ones, a zero map stays zero."""
    h = np.asarray(h, dtype=np.float64)
    lo, hi = h.min(), h.max()
    if hi > lo:
        return (h - lo) / (hi - lo)
    return np.ones_like(h) if hi > 0 else np.zeros_like(h)


def upsample_bilinear(h: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    h = np.asarray(h, dtype=np.float64)
    in_h, in_w = h.shape

    def axis_weights(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    rows = h[r0] * (1 - fr)[:, None] + h[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def gradcam(model, image: np.ndarray, target: int, output_size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Class activation heatmap over the last backbone feature map, in [0, 1].

    Channel weights are the spatial mean of the target logit's gradient with
    respect to the feature map; the map is the rectified weighted channel sum,
    min-max normalized and resized to the input resolution.
    """
    image = np.asarray(image, dtype=np.float32)
    batch = image[None] if image.ndim == 3 else image
    if batch.shape[0] != 1:
        raise ValueError("gradcam takes a single image")
    with no_grad():
        feats = model.features(batch, "eval")
    fmap = Tensor(np.array(feats.data if isinstance(feats, Tensor) else feats, dtype=np.float32), requires_grad=True)
    logits = model.image_logits(fmap)
    k = logits.shape[1]
    if not 0 <= int(target) < k:
        raise ValueError(f"target class {target} outside the {k} seen classes")
    onehot = np.zeros(logits.shape, dtype=np.float32)
    onehot[0, int(target)] = 1
    score = sum_all(mul(logits, Tensor(onehot)))
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    saved = [p.grad for p in params]
    if score.requires_grad:
        backward(score)
    for p, g in zip(params, saved):  # inspection leaves training state alone
        p.grad = g
    grad = fmap.grad if fmap.grad is not None else np.zeros_like(fmap.data)
    weights = grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, fmap.data[0].astype(np.float64), axes=1), 0)
    cam = normalize_heatmap(cam)
    if output_size is None:
        output_size = batch.shape[2:]
    if cam.shape != tuple(output_size):
        cam = np.clip(upsample_bilinear(cam, *output_size), 0, 1)
    return cam


# -- reports ---------------------------------------------------------------------


@dataclass
class PhaseAccuracy:
    phase: int
    classes_seen: int
    accuracy: float


@dataclass
class EvalReport:
    strategy: str
    phases: list[PhaseAccuracy] = field(default_factory=list)
    label: str = ""
    agreement: list[AgreementTable] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [p.accuracy for p in self.phases]

    @property
    def average_incremental_accuracy(self) -> float:
        return average_incremental_accuracy(self.accuracies)

    @property
    def strategy_label(self) -> str:
        return f"{self.strategy} ({self.label})" if self.label else self.strategy


REPORT_COLUMNS = ["phase", "classes_seen", "accuracy", "strategy"]
SWEEP_COLUMNS = ["value", "avg_incremental_accuracy"]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_report_csv(path, report: EvalReport) -> None:
    """One row per phase, then an ``average`` row with the mean accuracy."""
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for p in report.phases:
            w.writerow([p.phase, p.classes_seen, _fmt(p.accuracy), report.strategy_label])
        seen = report.phases[-1].classes_seen if report.phases else 0
        w.writerow(["average", seen, _fmt(report.average_incremental_accuracy), report.strategy_label])


def read_report_csv(path) -> tuple[list[PhaseAccuracy], float]:
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    phases = [PhaseAccuracy(int(r["phase"]), int(r["classes_seen"]), float(r["accuracy"])) for r in rows[:-1]]
    return phases, float(rows[-1]["accuracy"])


def write_agreement_csv(path, tables: Sequence[AgreementTable]) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AgreementTable.columns())
        for t in tables:
            w.writerow(t.as_row())


def write_sweep_csv(path, rows: Sequence[tuple[str, float]]) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for value, aia in rows:
            w.writerow([value, _fmt(aia)])


def write_pgm(path, heatmap: np.ndarray) -> None:
    """8-bit binary graymap (P5); 0 maps to black and 1 to white."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    pixels = np.round(np.clip(h, 0, 1) * 255).astype(np.uint8)
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise DataError(f"{path} is not a binary graymap")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def write_accuracy_svg(path, series: dict[str, Sequence[float]], title: str = "accuracy per phase") -> None:
    """Line chart of accuracy (y, 0..1) against phase (x); one polyline per series."""
    width, height, pad = 480, 320, 48
    n = max((len(v) for v in series.values()), default=1)
    span = max(n - 1, 1)

    def xy(i, acc):
        x = pad + (width - 2 * pad) * i / span
        y = height - pad - (height - 2 * pad) * float(acc)
        return f"{x:.1f},{y:.1f}"

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = height - pad - (height - 2 * pad) * tick
        out.append(f'<text x="{pad - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{tick:.2f}</text>')
    for i in range(n):
        x = pad + (width - 2 * pad) * i / span
        out.append(f'<text x="{x:.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{i}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="11">phase</text>')
    for k, (name, values) in enumerate(series.items()):
        color = colors[k % len(colors)]
        pts = " ".join(xy(i, a) for i, a in enumerate(values))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="10" fill="{color}">{name}</text>'
        )
    out.append("</svg>")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(out) + "\n")

