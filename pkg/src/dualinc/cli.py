"""Command-line entry point: ``dualinc {train,eval,sweep,analyze}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
The output root defaults to ``$DUALINC_OUTPUT_ROOT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint, model_arrays, model_meta, restore_model, save_checkpoint
from .config import OPTIMIZER_PRESETS, ExperimentConfig, coerce
from .data import Dataset, load_cifar100_dataset, make_phase_schedule, phase_data, synth_oriented
from .engine import BACKEND
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluator import (
    PLAIN_ENSEMBLE_LABEL,
    AgreementTable,
    EvalReport,
    PhaseAccuracy,
    agreement_analysis,
    evaluate,
    gradcam,
    write_accuracy_svg,
    write_agreement_csv,
    write_pgm,
    write_report_csv,
    write_sweep_csv,
)
from .model import Model, preset
from .trainer import ExemplarMemory, train_phase

log = logging.getLogger("dualinc")

OUTPUT_ROOT_ENV = "DUALINC_OUTPUT_ROOT"
METRICS_COLUMNS = ["phase", "epoch", "learning_rate", "loss_img", "loss_frgt", "loss_or", "loss_total", "train_accuracy"]
SWEEP_AXES = {"gamma": "gamma", "orientations": "orientations", "memory": "memory"}


def build_id() -> str:
    return (
        f"dualinc {__version__}; kernels={BACKEND}; numpy={np.__version__}; "
        f"python={platform.python_version()}"
    )


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def default_run_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.objective}-{cfg.strategy}-seed{cfg.seed}"


def run_directory(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) if cfg.output_dir else output_root() / default_run_name(cfg)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "cifar100":
        return load_cifar100_dataset(cfg.cifar_path)
    return synth_oriented(
        cfg.seed,
        cfg.total_classes,
        cfg.synth_samples_per_class,
        side=cfg.synth_side,
        test_per_class=cfg.synth_test_per_class,
        noise=cfg.synth_noise,
    )


def _determinism(cfg: ExperimentConfig):
    # one BLAS thread keeps reduction order, hence results, fixed
    return threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()


def _write_metrics(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            row = dataclasses.astuple(r)
            w.writerow([row[0], row[1]] + [f"{v:.6g}" for v in row[2:]])


def _report_label(cfg: ExperimentConfig) -> str:
    return PLAIN_ENSEMBLE_LABEL if cfg.plain_ensemble else ""


def _checkpoint_meta(cfg: ExperimentConfig, model: Model, phase: int, schedule, memory: ExemplarMemory) -> dict:
    # exemplars are stored as dataset indices; images are never written
    exemplars = {str(c): memory.class_samples(c).source_index.tolist() for c in memory.classes()}
    return {
        "model": model_meta(model),
        "phase": phase,
        "class_order": list(schedule.class_order),
        "config": {**cfg.to_dict(), "output_dir": ""},  # location is not state
        "exemplars": exemplars,
        "build": build_id(),
    }


def _train_single(cfg: ExperimentConfig, run_dir: Path) -> EvalReport:
    cfg.check_ensemble_guard()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    (run_dir / "run.json").write_text(
        json.dumps({"seed": cfg.seed, "build": build_id(), "command": "train"}, indent=2, sort_keys=True) + "\n"
    )
    dataset = load_dataset(cfg)
    if dataset.class_count != cfg.total_classes:
        raise ConfigError(f"dataset has {dataset.class_count} classes, config expects {cfg.total_classes}")
    schedule = make_phase_schedule(cfg.total_classes, cfg.base_classes, cfg.phases, cfg.seed)
    tcfg = cfg.train_config()
    orientations = tcfg.orientations
    model = Model(preset(cfg.preset), cfg.base_classes, len(orientations), cfg.seed)
    if dataset.train.images.shape[2] != model.config.input_side:
        raise ConfigError(f"preset {cfg.preset!r} expects {model.config.input_side}px images")
    memory = ExemplarMemory(cfg.memory, cfg.selection)
    report = EvalReport(cfg.strategy, label=_report_label(cfg), config=cfg.to_dict())
    reference = []
    records = []
    snapshot = None
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    with _determinism(cfg):
        for p in range(cfg.phases + 1):
            train_set, test_set = phase_data(dataset, schedule, p)
            result = train_phase(model, memory, train_set, schedule, p, snapshot, tcfg, cfg.seed)
            snapshot = result.snapshot
            records.extend(result.epochs)
            acc = evaluate(model, test_set, orientations, cfg.strategy)
            report.phases.append(PhaseAccuracy(p, schedule.seen_count(p), acc))
            if cfg.strategy != "none":
                reference.append(evaluate(model, test_set, orientations, "none"))
            if len(orientations) > 1:
                report.agreement.append(
                    agreement_analysis(model, test_set, orientations, orientations.angles[0], orientations.angles[1])
                )
            save_checkpoint(
                ckpt_dir / f"phase_{p}.ckpt", model_arrays(model), _checkpoint_meta(cfg, model, p, schedule, memory)
            )
            log.info("phase %d: %d classes, accuracy %.4f", p, schedule.seen_count(p), acc)
    _write_metrics(run_dir / "metrics.csv", records)
    write_report_csv(run_dir / "report.csv", report)
    if report.agreement:
        write_agreement_csv(run_dir / "agreement.csv", report.agreement)
    series = {report.strategy_label: report.accuracies}
    if reference:
        series["none"] = reference
    write_accuracy_svg(run_dir / "accuracy.svg", series)
    return report


def cmd_train(cfg: ExperimentConfig) -> Path:
    """Run every phase and write the run directory; returns its path."""
    run_dir = run_directory(cfg)
    if cfg.repeats == 1:
        _train_single(cfg, run_dir)
        return run_dir
    rows = []
    for i in range(cfg.repeats):
        sub = cfg.replace(seed=cfg.seed + i, repeats=1, output_dir=str(run_dir / f"repeat_{i}"))
        rows.append((sub.seed, _train_single(sub, Path(sub.output_dir)).average_incremental_accuracy))
    with open(run_dir / "repeats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "avg_incremental_accuracy"])
        for seed, aia in rows:
            w.writerow([seed, f"{aia:.6f}"])
        w.writerow(["mean", f"{np.mean([a for _, a in rows]):.6f}"])
    return run_dir


def _phase_checkpoints(target: Path) -> list[Path]:
    if target.is_dir():
        ckpts = sorted(
            (target / "checkpoints").glob("phase_*.ckpt"), key=lambda p: int(p.stem.split("_")[1])
        )
        if not ckpts:
            raise DataError(f"no checkpoints under {target}")
        return ckpts
    if not target.exists():
        raise DataError(f"checkpoint {target} does not exist")
    return [target]


def _load_for_eval(path: Path, overrides: dict):
    arrays, meta = load_checkpoint(path)
    try:
        cfg = ExperimentConfig.from_dict({**meta["config"], **overrides})
        model = restore_model(arrays, meta["model"])
    except KeyError as exc:
        raise DataError(f"checkpoint {path} lacks {exc}") from exc
    if tuple(meta["class_order"]) != make_phase_schedule(
        cfg.total_classes, cfg.base_classes, cfg.phases, cfg.seed
    ).class_order:
        raise ConfigError(f"checkpoint {path} was trained with a different class schedule")
    return cfg, model, meta


def cmd_eval(target, overrides: Optional[dict] = None, output: Optional[Path] = None) -> EvalReport:
    """Re-evaluate one checkpoint, or every phase checkpoint of a run directory."""
    overrides = dict(overrides or {})
    target = Path(target)
    report = None
    dataset = None
    for path in _phase_checkpoints(target):
        cfg, model, meta = _load_for_eval(path, overrides)
        cfg.check_ensemble_guard()
        if dataset is None:
            dataset = load_dataset(cfg)
            schedule = make_phase_schedule(cfg.total_classes, cfg.base_classes, cfg.phases, cfg.seed)
            report = EvalReport(cfg.strategy, label=_report_label(cfg), config=cfg.to_dict())
        phase = int(meta["phase"])
        if model.class_count != schedule.seen_count(phase):
            raise ConfigError(f"checkpoint {path} has {model.class_count} outputs, phase {phase} needs more")
        _, test_set = phase_data(dataset, schedule, phase)
        with _determinism(cfg):
            acc = evaluate(model, test_set, cfg.orientation_set, cfg.strategy)
        report.phases.append(PhaseAccuracy(phase, schedule.seen_count(phase), acc))
    if output is not None:
        output.parent.mkdir(parents=True, exist_ok=True)
        write_report_csv(output, report)
    return report


def _sweep_value(axis: str, raw: str):
    f = {f.name: f for f in dataclasses.fields(ExperimentConfig)}[SWEEP_AXES[axis]]
    return coerce(f, raw)


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[str]) -> Path:
    """One full run per value with a shared seed; writes ``sweep.csv``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    root = Path(cfg.output_dir) if cfg.output_dir else output_root() / f"sweep-{axis}-seed{cfg.seed}"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in values:
        value = _sweep_value(axis, raw)
        sub = cfg.replace(**{SWEEP_AXES[axis]: value}, repeats=1, output_dir=str(root / f"{axis}={raw}"))
        report = _train_single(sub, Path(sub.output_dir))
        rows.append((raw, report.average_incremental_accuracy))
    write_sweep_csv(root / "sweep.csv", rows)
    return root


def cmd_analyze(
    checkpoint, o1: float, o2: float, heatmap_ids: Sequence[int] = (), output: Optional[Path] = None
) -> AgreementTable:
    """Agreement counts on base-phase test data, plus optional Grad-CAM graymaps."""
    checkpoint = Path(checkpoint)
    paths = _phase_checkpoints(checkpoint)
    path = paths[-1]
    cfg, model, _ = _load_for_eval(path, {})
    orientations = cfg.orientation_set
    dataset = load_dataset(cfg)
    schedule = make_phase_schedule(cfg.total_classes, cfg.base_classes, cfg.phases, cfg.seed)
    _, base_test = phase_data(dataset, schedule, 0)
    with _determinism(cfg):
        table = agreement_analysis(model, base_test, orientations, o1, o2)
    out = output or (path.parent.parent if checkpoint.is_file() else checkpoint) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    write_agreement_csv(out / "agreement.csv", [table])
    for i in heatmap_ids:
        if not 0 <= i < len(base_test):
            raise DataError(f"sample id {i} outside the {len(base_test)} base-phase test samples")
        heat = gradcam(model, base_test.images[i], int(base_test.labels[i]))
        write_pgm(out / f"heatmap_{i}.pgm", heat)
    return table


# -- argument parsing --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI file; flags override its values")
    parser.add_argument("--optimizer-preset", choices=sorted(OPTIMIZER_PRESETS))
    group = parser.add_argument_group("experiment")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        help_text = f.metadata.get("help") or None
        group.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(), help=help_text)


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    values = cfg.to_dict()
    if args.optimizer_preset:
        values.update(OPTIMIZER_PRESETS[args.optimizer_preset])
    by_name = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for name, f in by_name.items():
        raw = getattr(args, name, None)
        if raw is not None:
            values[name] = coerce(f, raw)
    return ExperimentConfig.from_dict(values)


def _overrides_from_args(args) -> dict:
    by_name = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    return {name: coerce(f, getattr(args, name)) for name, f in by_name.items() if getattr(args, name, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualinc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train all phases and write a run directory")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint or a run directory")
    p.add_argument("target", help="checkpoint file or run directory")
    p.add_argument("--output", help="report CSV path")
    for name in ("strategy", "orientations", "allow_plain_ensemble", "deterministic"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None)

    p = sub.add_parser("sweep", help="one run per value along an axis")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, nargs="+")
    _add_config_flags(p)

    p = sub.add_parser("analyze", help="orientation agreement counts and Grad-CAM maps")
    p.add_argument("checkpoint", help="checkpoint file or run directory (last phase)")
    p.add_argument("--o1", type=float, default=0.0)
    p.add_argument("--o2", type=float, default=90.0)
    p.add_argument("--heatmaps", type=int, nargs="*", default=[], metavar="ID")
    p.add_argument("--output", help="analysis directory")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train":
        print(cmd_train(_config_from_args(args)))
    elif args.command == "eval":
        out = Path(args.output) if args.output else None
        report = cmd_eval(args.target, _overrides_from_args(args), out)
        for p in report.phases:
            print(f"phase {p.phase}  classes {p.classes_seen}  accuracy {p.accuracy:.4f}")
        print(f"average incremental accuracy {report.average_incremental_accuracy:.4f}  [{report.strategy_label}]")
    elif args.command == "sweep":
        print(cmd_sweep(_config_from_args(args), args.axis, args.values))
    elif args.command == "analyze":
        out = Path(args.output) if args.output else None
        table = cmd_analyze(args.checkpoint, args.o1, args.o2, args.heatmaps, out)
        for name, value in zip(AgreementTable.columns(), table.as_row()):
            print(f"{name:20s} {value}")
    return 0


EXIT_CODES = ((ConfigError, 1), (DataError, 2), (ShapeError, 2), (NumericError, 3))


def main(argv: Optional[Sequence[str]] = None) -> int:
    warnings.simplefilter("default")
    try:
        return run(argv)
    except tuple(e for e, _ in EXIT_CODES) as exc:
        code = next(c for e, c in EXIT_CODES if isinstance(exc, e))
        print(f"dualinc: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
