"""Command line: ``snapens train | grid | plot``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 partial grid failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .attacks import AttackSpec
from .data import DataFormatError
from .harness import ConfigError, ExperimentConfig
from .models import FormatError
from .optim import OptimizerConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GRID = 0, 1, 2, 3

log = logging.getLogger("snapens")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_experiment_flags(p: argparse.ArgumentParser, sweep: bool) -> None:
    many = "comma-separated list" if sweep else None
    p.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir", help="dataset directory (defaults to $SNAPENS_MNIST_DIR / $SNAPENS_CIFAR10_DIR)")
    p.add_argument("--optimizer", default="HB", help=many or "SGD, HB or NAG")
    p.add_argument("--lr", default="0.02", help=many)
    p.add_argument("--momentum", default="0.9", help=many)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--snapshots", default="10", help=many or "ensemble size M")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--epsilons", type=_floats, default=list(harness.DEFAULT_EPSILONS))
    p.add_argument("--attack", default="FGSM,PGD", help="comma-separated attack families")
    p.add_argument("--alpha", type=float, default=0.02, help="PGD step size")
    p.add_argument("--steps", type=int, default=2, help="PGD steps")
    p.add_argument("--random-start", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--attack-target", default="ENSEMBLE_WHITEBOX",
                   help="ENSEMBLE_WHITEBOX or TRANSFER_FROM_SINGLE")
    p.add_argument("--mode", default="REGULAR", help="REGULAR or ADVERSARIAL_FGSM")
    p.add_argument("--train-epsilon", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=harness.DEFAULT_BATCH_SIZE)
    p.add_argument("--sampling", default="SHUFFLE_EPOCH", help="SHUFFLE_EPOCH or BOOTSTRAP")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-subset", type=int, help="evaluate on the first N test images")
    p.add_argument("--train-subset", type=int, help="train on the first N training images")
    p.add_argument("--timing", action=argparse.BooleanOptionalAction, default=False,
                   help="record epoch wall-clock seconds (breaks byte-identical reruns)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snapens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration and write its CSV")
    _add_experiment_flags(p, sweep=False)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--save-snapshots", help="directory for the final snapshot buffer")

    p = sub.add_parser("grid", help="sweep optimizer, snapshots, lr and momentum")
    _add_experiment_flags(p, sweep=True)
    p.add_argument("--preset", action="append", choices=sorted(harness.PRESETS), default=[],
                   help="fill an axis with the standard sweep values")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("plot", help="accuracy-vs-epoch charts from a run CSV")
    p.add_argument("csv")
    p.add_argument("--out", required=True, help="image path (format from extension)")
    return parser


def read_config_file(path: str | Path) -> list[str]:
    """Turn ``key = value`` lines into flag tokens placed before the real ones."""
    tokens = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            tokens.append("--no-" + flag[2:])
        else:
            tokens.append(f"{flag}={value}")
    return tokens


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            file_tokens = read_config_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        # re-parse with the file's flags first so explicit flags win
        idx = argv.index(args.command) + 1
        args = parser.parse_args(argv[:idx] + file_tokens + argv[idx:])
    return args


def _attacks(args) -> tuple[AttackSpec, ...]:
    return tuple(AttackSpec(name.strip(), alpha=args.alpha, steps=args.steps, random_start=args.random_start)
                 for name in args.attack.split(",") if name.strip())


def make_config(args, optimizer=None, lr=None, momentum=None, snapshots=None) -> ExperimentConfig:
    try:
        opt = OptimizerConfig(optimizer or args.optimizer, float(lr or args.lr),
                              float(momentum or args.momentum), args.weight_decay)
        return ExperimentConfig(
            dataset=args.dataset, optimizer=opt, training_mode=args.mode, train_epsilon=args.train_epsilon,
            epochs=args.epochs, snapshots=int(snapshots or args.snapshots), epsilons=tuple(args.epsilons),
            attacks=_attacks(args), attack_target=args.attack_target, batch_size=args.batch_size,
            sampling=args.sampling, seed=args.seed, out=args.out, eval_subset=args.eval_subset,
            train_subset=args.train_subset, data_dir=args.data_dir, timing=args.timing,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    config = make_config(args)
    result = harness.train(config)
    harness.write_csv(result.records, config.out)
    if args.save_snapshots:
        result.buffer.dump(args.save_snapshots)
    log.info("wrote %d records to %s", len(result.records), config.out)
    return EXIT_OK


def grid_axes(args) -> dict[str, list]:
    axes = {
        "optimizer": [v.strip() for v in args.optimizer.split(",")],
        "snapshots": [int(v) for v in args.snapshots.split(",")],
        "lr": _floats(args.lr),
        "momentum": _floats(args.momentum),
    }
    preset_axes = set()
    for preset in args.preset:
        axes.update(harness.PRESETS[preset])
        preset_axes.update(harness.PRESETS[preset])
    # single-valued axes stay in the base config rather than the cell names
    return {k: v for k, v in axes.items() if len(v) > 1 or k in preset_axes}


def cmd_grid(args) -> int:
    try:
        axes = grid_axes(args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    first = lambda text: text.split(",")[0]  # noqa: E731
    base = make_config(args, first(args.optimizer), first(args.lr), first(args.momentum), first(args.snapshots))
    datasets = harness.load_data(base)
    result = harness.run_grid(base, axes, args.out, datasets=datasets)
    log.info("grid: %d completed, %d skipped, %d failed", len(result.completed), len(result.skipped),
             len(result.failed))
    for name, err in result.failed.items():
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return EXIT_GRID if result.failed else EXIT_OK


def cmd_plot(args) -> int:
    from .plot import plot_csv

    plot_csv(args.csv, args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return {"train": cmd_train, "grid": cmd_grid, "plot": cmd_plot}[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
