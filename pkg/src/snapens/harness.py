"""Training loops, per-epoch robust evaluation, CSV output and experiment grids.

Each epoch ends with an evaluation of the live model (SINGLE) and of the
snapshot ensemble (ENSEMBLE) against every configured attack and epsilon.
Snapshots are recorded after every optimiser step.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attacks, data, models
from .attacks import AttackFamily, AttackSpec
from .data import Dataset, Sampling
from .ensemble import EnsemblePredictor, SnapshotBuffer
from .models import Architecture, ParameterSet, SingleModel
from .optim import Family, Optimizer, OptimizerConfig

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "attack", "epsilon", "predictor", "attack_target", "accuracy", "seconds"]
DEFAULT_EPSILONS = (0.0, 0.01, 0.02, 0.03, 0.04)
DEFAULT_ATTACKS = (AttackSpec(AttackFamily.FGSM), AttackSpec(AttackFamily.PGD, alpha=0.02, steps=2))
DEFAULT_BATCH_SIZE = 32
EVAL_BATCH = 500


class ConfigError(ValueError):
    """Invalid experiment configuration, raised before any work is done."""


class _Choice(enum.Enum):
    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper().replace("-", "_")]
        except KeyError:
            raise ConfigError(f"unknown {cls.__name__} {value!r}; expected one of {[m.name for m in cls]}") from None


class TrainingMode(_Choice):
    REGULAR = "REGULAR"
    ADVERSARIAL_FGSM = "ADVERSARIAL_FGSM"


class AttackTarget(_Choice):
    ENSEMBLE_WHITEBOX = "ENSEMBLE_WHITEBOX"
    TRANSFER_FROM_SINGLE = "TRANSFER_FROM_SINGLE"


class PredictorMode(_Choice):
    SINGLE = "SINGLE"
    ENSEMBLE = "ENSEMBLE"


DATASET_ARCH = {"mnist": Architecture.MNIST_NET, "cifar10": Architecture.CIFAR10_NET}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training_mode: TrainingMode = TrainingMode.REGULAR
    train_epsilon: float = 0.0
    epochs: int = 20
    snapshots: int = 10
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    attacks: tuple[AttackSpec, ...] = DEFAULT_ATTACKS
    attack_target: AttackTarget = AttackTarget.ENSEMBLE_WHITEBOX
    batch_size: int = DEFAULT_BATCH_SIZE
    sampling: Sampling = Sampling.SHUFFLE_EPOCH
    seed: int = 0
    out: str | None = None
    eval_subset: int | None = None
    train_subset: int | None = None
    data_dir: str | None = None
    timing: bool = False

    def __post_init__(self) -> None:
        set_ = object.__setattr__
        set_(self, "dataset", str(self.dataset).lower().replace("-", ""))
        if self.dataset not in DATASET_ARCH:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected mnist or cifar10")
        set_(self, "training_mode", TrainingMode.parse(self.training_mode))
        set_(self, "attack_target", AttackTarget.parse(self.attack_target))
        try:
            set_(self, "sampling", Sampling.parse(self.sampling))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        set_(self, "epsilons", tuple(float(e) for e in self.epsilons))
        set_(self, "attacks", tuple(self.attacks))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.snapshots < 1:
            raise ConfigError(f"snapshots must be >= 1, got {self.snapshots}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.epsilons:
            raise ConfigError("epsilon list is empty")
        if any(e < 0 or not np.isfinite(e) for e in self.epsilons):
            raise ConfigError(f"epsilons must be finite and non-negative, got {list(self.epsilons)}")
        if list(self.epsilons) != sorted(self.epsilons):
            raise ConfigError(f"epsilons must be sorted ascending, got {list(self.epsilons)}")
        if not self.attacks:
            raise ConfigError("no attacks to evaluate")
        if self.train_epsilon < 0:
            raise ConfigError(f"training epsilon must be >= 0, got {self.train_epsilon}")
        for name in ("eval_subset", "train_subset"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    @property
    def arch(self) -> Architecture:
        return DATASET_ARCH[self.dataset]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunRecord:
    epoch: int
    attack: AttackFamily
    epsilon: float
    predictor: PredictorMode
    attack_target: AttackTarget
    accuracy: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch), self.attack.name, f"{self.epsilon:.6g}", self.predictor.name,
                self.attack_target.name, f"{self.accuracy:.6g}", f"{self.seconds:.6g}"]


@dataclass
class Counters:
    """Instrumentation: optimiser steps, training-time attacks, parameter gradients."""

    iterations: int = 0
    attack_calls: int = 0
    gradient_evaluations: int = 0


@dataclass
class TrainingResult:
    params: ParameterSet
    buffer: SnapshotBuffer
    records: list[RunRecord]
    losses: list[float]
    counters: Counters

    def __iter__(self):
        return iter((self.params, self.buffer, self.records))


Evaluator = Callable[[int, ParameterSet, SnapshotBuffer, Dataset], list[RunRecord]]


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train, test = data.load_dataset(config.dataset, config.data_dir)
    return train.subset(config.train_subset), test.subset(config.eval_subset)


def evaluate(config: ExperimentConfig, epoch: int, params: ParameterSet, buffer: SnapshotBuffer,
             test: Dataset) -> list[RunRecord]:
    """Robust accuracy of SINGLE and ENSEMBLE for every (attack, epsilon)."""
    single = SingleModel(params)
    predictors = {PredictorMode.SINGLE: single, PredictorMode.ENSEMBLE: EnsemblePredictor(buffer)}
    records = []
    for a, template in enumerate(config.attacks):
        for e, eps in enumerate(config.epsilons):
            spec = dataclasses.replace(template, epsilon=eps)
            for p, (mode, predictor) in enumerate(predictors.items()):
                source = None
                if mode is PredictorMode.ENSEMBLE and config.attack_target is AttackTarget.TRANSFER_FROM_SINGLE:
                    source = single
                rng = np.random.default_rng([config.seed, epoch, a, e, p])
                acc = attacks.robust_accuracy(predictor, test.images, test.labels, spec,
                                              batch_size=EVAL_BATCH, source=source, rng=rng)
                records.append(RunRecord(epoch, spec.family, eps, mode, config.attack_target, acc))
    return records


def train(config: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None,
          evaluator: Evaluator | None = None,
          on_epoch_end: Callable[[int, TrainingResult], None] | None = None) -> TrainingResult:
    """Run the configured training mode; ``datasets`` bypasses loading from disk."""
    train_set, test_set = datasets if datasets is not None else load_data(config)
    if train_set.images.shape[1:] != config.arch.input_shape:
        raise ConfigError(f"{config.dataset} expects images {config.arch.input_shape}, got {train_set.images.shape[1:]}")
    if evaluator is None:
        def evaluator(epoch, params, buffer, test):
            return evaluate(config, epoch, params, buffer, test)

    adversarial = config.training_mode is TrainingMode.ADVERSARIAL_FGSM
    params = models.init_parameters(config.arch, config.seed)
    optimizer = Optimizer(config.optimizer)
    batcher = data.Batcher(config.batch_size, config.sampling, config.seed)
    result = TrainingResult(params, SnapshotBuffer(config.snapshots), [], [], Counters())
    counters = result.counters
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        for idx in batcher.epoch(len(train_set)):
            x, y = train_set.images[idx], train_set.labels[idx]
            if adversarial:
                x = attacks.fgsm(SingleModel(params), x, y, config.train_epsilon)
                counters.attack_calls += 1
            loss, grads, _ = models.backward(params, x, y, need_input=False)
            counters.gradient_evaluations += 1
            optimizer.step(params, grads)
            counters.iterations += 1
            result.buffer.record(counters.iterations, params)
            result.losses.append(loss)
        records = evaluator(epoch, params, result.buffer, test_set)
        seconds = time.perf_counter() - start if config.timing else 0.0
        result.records.extend(dataclasses.replace(r, seconds=seconds) for r in records)
        log.info("epoch %d: loss %.4f, %d iterations", epoch, float(np.mean(result.losses[-50:])), counters.iterations)
        if on_epoch_end is not None:
            on_epoch_end(epoch, result)
    return result


def train_regular(config: ExperimentConfig, **kwargs) -> TrainingResult:
    if config.training_mode is not TrainingMode.REGULAR:
        raise ConfigError("train_regular needs training_mode REGULAR")
    return train(config, **kwargs)


def train_adversarial_fgsm(config: ExperimentConfig, **kwargs) -> TrainingResult:
    if config.training_mode is not TrainingMode.ADVERSARIAL_FGSM:
        raise ConfigError("train_adversarial_fgsm needs training_mode ADVERSARIAL_FGSM")
    return train(config, **kwargs)


def write_csv(records: Iterable[RunRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(r.row() for r in records)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- grids ------------------------------------------------------------------------

GRID_AXES = ("optimizer", "snapshots", "lr", "momentum")
PRESETS = {
    "optimizers": {"optimizer": ["SGD", "NAG", "HB"]},
    "snapshots": {"snapshots": [10, 20, 40, 98]},
    "learning-rates": {"lr": [0.002, 0.005, 0.01, 0.02]},
    "momenta": {"momentum": [0.5, 0.7, 0.9]},
}


@dataclass(frozen=True)
class Cell:
    values: tuple[tuple[str, object], ...]

    @property
    def name(self) -> str:
        return "_".join(f"{k}={v}" for k, v in self.values) or "base"

    def config(self, base: ExperimentConfig) -> ExperimentConfig:
        v = dict(self.values)
        opt = base.optimizer
        try:
            opt = dataclasses.replace(
                opt,
                family=Family.parse(v.get("optimizer", opt.family)),
                learning_rate=float(v.get("lr", opt.learning_rate)),
                momentum=float(v.get("momentum", opt.momentum)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return base.replace(optimizer=opt, snapshots=int(v.get("snapshots", base.snapshots)),
                            seed=cell_seed(base.seed, self))


def cell_seed(base_seed: int, cell: Cell) -> int:
    digest = hashlib.sha256(f"{base_seed}|{cell.name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def grid_cells(axes: dict[str, Sequence]) -> list[Cell]:
    unknown = set(axes) - set(GRID_AXES)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}; expected a subset of {list(GRID_AXES)}")
    names = [a for a in GRID_AXES if axes.get(a)]
    return [Cell(tuple(zip(names, combo))) for combo in itertools.product(*(axes[a] for a in names))]


@dataclass
class GridResult:
    completed: list[str]
    skipped: list[str]
    failed: dict[str, str]
    summary: Path


def run_grid(base: ExperimentConfig, axes: dict[str, Sequence], out_dir: str | Path,
             datasets: tuple[Dataset, Dataset] | None = None) -> GridResult:
    """Train every cell of the cartesian product of ``axes``.

    Each cell writes ``cells/<name>.csv`` followed by a ``.done`` marker, so a
    rerun skips finished cells. A failing cell is logged and the grid goes on.
    """
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(axes)
    configs = [c.config(base) for c in cells]  # config errors surface before any training
    result = GridResult([], [], {}, out_dir / "summary.csv")
    for cell, config in zip(cells, configs):
        csv_path, marker = cell_dir / f"{cell.name}.csv", cell_dir / f"{cell.name}.done"
        if marker.exists() and csv_path.exists():
            result.skipped.append(cell.name)
            continue
        log.info("grid cell %s (seed %d)", cell.name, config.seed)
        try:
            run = train(config, datasets=datasets)
            write_csv(run.records, csv_path)
            marker.write_text("")
            result.completed.append(cell.name)
        except Exception as exc:  # isolate the cell, keep the grid going
            log.exception("grid cell %s failed", cell.name)
            result.failed[cell.name] = f"{type(exc).__name__}: {exc}"
    _merge(cells, cell_dir, result.summary)
    return result


def _merge(cells: list[Cell], cell_dir: Path, summary: Path) -> None:
    axis_names = [k for k, _ in cells[0].values] if cells else []
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(axis_names + CSV_HEADER)
        for cell in cells:
            if not (cell_dir / f"{cell.name}.done").exists():
                continue
            for row in read_csv(cell_dir / f"{cell.name}.csv"):
                writer.writerow([str(v) for _, v in cell.values] + [row[k] for k in CSV_HEADER])
