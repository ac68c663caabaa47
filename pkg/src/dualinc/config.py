"""Experiment configuration stored as an INI file with one section per module."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .data import OrientationSet
from .errors import ConfigError
from .evaluator import STRATEGIES
from .trainer import OBJECTIVES, TrainConfig


def _opt(section: str, default, help: str = ""):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class ExperimentConfig:
    # [data]
    dataset: str = _opt("data", "synthetic", "synthetic | cifar100")
    cifar_path: str = _opt("data", "", "directory holding train.bin and test.bin")
    synth_samples_per_class: int = _opt("data", 60)
    synth_test_per_class: int = _opt("data", 30)
    synth_side: int = _opt("data", 16)
    synth_noise: float = _opt("data", 0.3)
    # [schedule]
    total_classes: int = _opt("schedule", 8)
    base_classes: int = _opt("schedule", 4)
    phases: int = _opt("schedule", 2, "incremental phases after the base phase")
    # [model]
    preset: str = _opt("model", "small", "cifar | small | tiny")
    # [train]
    objective: str = _opt("train", "dilf", "dilf | da | ss | plain")
    orientations: str = _opt("train", "0,90", "comma-separated angles, first must be 0")
    gamma: float = _opt("train", 0.5)
    temperature: float = _opt("train", 2.0)
    memory: int = _opt("train", 20, "replay exemplars per class")
    selection: str = _opt("train", "herding", "herding | random")
    distill_on_all: bool = _opt("train", False)
    epochs: int = _opt("train", 20)
    batch_size: int = _opt("train", 32)
    learning_rate: float = _opt("train", 0.1)
    momentum: float = _opt("train", 0.9)
    weight_decay: float = _opt("train", 5e-4)
    lr_schedule: str = _opt("train", "step", "step | cosine")
    milestones: str = _opt("train", "14", "comma-separated epochs for step decay")
    lr_decay: float = _opt("train", 0.1)
    # [eval]
    strategy: str = _opt("eval", "avg", "avg | mode | max | none")
    allow_plain_ensemble: bool = _opt("eval", False, "permit ensemble evaluation of plain-trained models")
    # [run]
    seed: int = _opt("run", 0)
    repeats: int = _opt("run", 1)
    deterministic: bool = _opt("run", True)
    output_dir: str = _opt("run", "", "run directory (default: $DUALINC_OUTPUT_ROOT/<name>)")

    def __post_init__(self):
        self.validate()

    # -- derived ---------------------------------------------------------------

    @property
    def orientation_set(self) -> OrientationSet:
        return OrientationSet.parse(self.orientations)

    @property
    def milestone_epochs(self) -> tuple[int, ...]:
        try:
            return tuple(int(m) for m in self.milestones.split(",") if m.strip())
        except ValueError:
            raise ConfigError(f"milestones must be comma-separated integers, got {self.milestones!r}") from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            orientations=self.orientation_set,
            objective=self.objective,
            gamma=self.gamma,
            temperature=self.temperature,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.lr_schedule,
            milestones=self.milestone_epochs,
            lr_decay=self.lr_decay,
            memory_per_class=self.memory,
            selection=self.selection,
            distill_on_all=self.distill_on_all,
        )

    @property
    def plain_ensemble(self) -> bool:
        return self.objective == "plain" and self.strategy != "none" and len(self.orientation_set) > 1

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "cifar100"):
            raise ConfigError(f"dataset must be synthetic or cifar100, got {self.dataset!r}")
        if self.dataset == "cifar100" and not self.cifar_path:
            raise ConfigError("dataset cifar100 needs cifar_path")
        if self.phases < 1:
            raise ConfigError("phases must be at least 1")
        if self.memory < 0:
            raise ConfigError("memory must be nonnegative")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        self.train_config()  # range checks on the training knobs

    def check_ensemble_guard(self) -> None:
        """Refuse ensembling a plain-trained model unless explicitly allowed."""
        if self.plain_ensemble and not self.allow_plain_ensemble:
            raise ConfigError(
                f"strategy {self.strategy!r} on a plain-trained model: rotated views it never saw "
                "pull the ensemble down. Set allow_plain_ensemble to evaluate it anyway."
            )

    # -- (de)serialization ---------------------------------------------------------

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in fields(self):
            section = f.metadata["section"]
            if not parser.has_section(section):
                parser.add_section(section)
            value = getattr(self, f.name)
            parser.set(section, f.name, str(value).lower() if isinstance(value, bool) else str(value))
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser.items(section))
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        by_name = {f.name: f for f in fields(cls)}
        values = (base or cls()).to_dict()
        for section in parser.sections():
            for key, raw in parser.items(section):
                f = by_name.get(key)
                if f is None or f.metadata["section"] != section:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                values[key] = coerce(f, raw)
        return cls.from_dict(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def coerce(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot read {raw!r} as {kind}") from None
    return raw.strip()


OPTIMIZER_PRESETS = {
    "desk": {"epochs": 20, "milestones": "14", "batch_size": 32, "learning_rate": 0.1},
    # full-length CIFAR-100 protocol
    "full": {"epochs": 160, "milestones": "80,120", "batch_size": 128, "learning_rate": 0.1},
}
