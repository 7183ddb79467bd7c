"""
The canonfield command line: one subcommand per pipeline stage or
experiment, all sharing --config, --seed, --jobs, --out and -v.
"""
import argparse
import logging
import pathlib
import sys
from collections.abc import Sequence

import pandas as pd
from pydantic import ValidationError

from . import __version__
from .classifier import TrainConfig, evaluate, init_mlp, load_model, save_model, train
from .command import ArgumentParser, Command, RunContext
from .constants import ExitCode, Split
from .elm import load_features, save_features
from .errors import CanonError, UsageError
from .experiments import (
    AxisStabilityConfig,
    InvarianceConfig,
    Reconstruct2dConfig,
    SweepConfig,
    reconstruct2d,
    run_axis_stability,
    run_invariance_suite,
    run_sweep,
)
from .pipeline import DatasetManifest, ExperimentReport, ExtractionConfig, extract_features, read_config, scan_modelnet
from .shapes import write_synthetic_dataset
from .types import Option, Positional

logger = logging.getLogger("canonfield")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
HANDLER_NAME = "canonfield-cli"


def _manifest(root: pathlib.Path | None, manifest: pathlib.Path | None) -> DatasetManifest:
    if manifest is not None:
        return DatasetManifest.load(manifest)
    return scan_modelnet(root)


def _finish(context: RunContext, report: ExperimentReport) -> int:
    summary = report.write(context.out)
    print(report.render(), end="")
    logger.info("Wrote %s", summary)
    if report.passed is False:
        return ExitCode.data
    return ExitCode.ok


def scan(context: RunContext, root: Positional[pathlib.Path | None] = None):
    """Index a class/{train,test}/*.off tree into manifest.json."""
    manifest = scan_modelnet(root)
    context.out.mkdir(parents=True, exist_ok=True)
    manifest.save(context.out / "manifest.json")
    for split in Split:
        print(f"{split.value}: {len(manifest.split(split))} instances")
    print(f"classes: {','.join(manifest.class_names)}")


def extract(
    context: RunContext,
    config: ExtractionConfig,
    root: Positional[pathlib.Path | None] = None,
    manifest: Option[pathlib.Path | None] = None,
):
    """Extract ELM features for every instance of a dataset."""
    context.out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(context.out / "extraction.log", mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    try:
        logger.info("Extraction config: %s", config.recorded())
        dataset = _manifest(root, manifest)
        dataset.save(context.out / "manifest.json")
        result = extract_features(dataset, config, jobs=context.jobs)
        for split, features in result.features.items():
            save_features(features, context.out / f"features-{split.value}.txt")
        for failure in result.failures:
            logger.info("failed: %s: %s", failure.instance_id, failure.error)
        logger.info(
            "basis %s, %d failures, %.1fs; stage timings %s",
            result.basis_id,
            len(result.failures),
            result.seconds,
            {stage: round(seconds, 3) for stage, seconds in result.timings.items()},
        )
    finally:
        logger.removeHandler(handler)
        handler.close()


def train_command(
    context: RunContext,
    config: TrainConfig,
    features: Positional[pathlib.Path],
    test_features: Option[pathlib.Path | None] = None,
):
    """Train the classifier on a feature file."""
    train_set = load_features(features, split=Split.train)
    if len(train_set.class_names) >= 2:
        classes = len(train_set.class_names)
    else:
        classes = int(train_set.labels().max()) + 1
    model = init_mlp(
        train_set.k,
        config.hidden,
        classes,
        seed=config.seed,
        dropout_rate=config.dropout_rate or 0.0,
        basis_id=train_set.basis_id,
        class_names=train_set.class_names,
    )
    model, report = train(model, train_set, config)
    if test_features is not None:
        accuracy, _ = evaluate(model, load_features(test_features, split=Split.test))
        report = report.replace(test_accuracy=accuracy)
        print(f"test accuracy: {accuracy:.4f}")
    context.out.mkdir(parents=True, exist_ok=True)
    save_model(model, context.out / "model.txt")
    report.to_csv(context.out / "training.csv")
    print(f"final loss: {report.epochs[-1].loss:.4f}, train accuracy: {report.epochs[-1].train_acc:.4f}")


def eval_command(context: RunContext, model: Positional[pathlib.Path], features: Positional[pathlib.Path]):
    """Instance-level accuracy of a trained model on a feature file."""
    trained = load_model(model)
    accuracy, predictions = evaluate(trained, load_features(features, split=Split.test))
    context.out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(predictions, columns=["instance_id", "label", "predicted"]).to_csv(
        context.out / "predictions.csv", index=False
    )
    print(f"accuracy: {accuracy:.4f}")


def invariance(context: RunContext, config: InvarianceConfig):
    """Run the rotation, scale, permutation and origin invariance suite."""
    return _finish(context, run_invariance_suite(config))


def axis_stability(context: RunContext, config: AxisStabilityConfig):
    """Compare the stability of the canonical axis against PCA."""
    return _finish(context, run_axis_stability(config))


def reconstruct2d_command(context: RunContext, config: Reconstruct2dConfig):
    """Reconstruct a 2D distance field at several node counts."""
    return _finish(context, reconstruct2d(config))


def synthesize(
    context: RunContext,
    root: Positional[pathlib.Path],
    train_per_class: Option[int] = 100,
    test_per_class: Option[int] = 30,
):
    """Write the procedural four-class dataset."""
    write_synthetic_dataset(root, train_per_class, test_per_class, seed=context.seed or 0)


def sweep(
    context: RunContext,
    config: SweepConfig,
    root: Positional[pathlib.Path | None] = None,
    manifest: Option[pathlib.Path | None] = None,
):
    """Accuracy over sampling density, node count and network depth."""
    return _finish(context, run_sweep(_manifest(root, manifest), config, jobs=context.jobs))


COMMANDS = [
    Command(scan),
    Command(extract),
    Command(train_command, name="train"),
    Command(eval_command, name="eval"),
    Command(invariance),
    Command(axis_stability),
    Command(reconstruct2d_command, name="reconstruct2d"),
    Command(synthesize),
    Command(sweep),
]


def build_parser() -> ArgumentParser:
    # Global flags are accepted before or after the subcommand name
    common = ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=pathlib.Path, help="key=value config file")
    common.add_argument("--seed", help="master seed, overrides the config")
    common.add_argument("--jobs", help="parallel workers")
    common.add_argument("--out", type=pathlib.Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = ArgumentParser(prog="canonfield", parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(title="commands", metavar="COMMAND")
    for command in COMMANDS:
        command.add_to(subparsers, parents=[common])
    return parser


def configure_logging(verbose: bool):
    package_logger = logging.getLogger("canonfield")
    for handler in list(package_logger.handlers):
        if handler.get_name() == HANDLER_NAME:
            package_logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.set_name(HANDLER_NAME)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        namespace = parser.parse_args(argv)
        command = getattr(namespace, "command", None)
        if command is None:
            raise UsageError(parser.format_usage().strip())
        try:
            context = RunContext(
                config_values=read_config(namespace.config) if "config" in namespace else {},
                seed=getattr(namespace, "seed", None),
                jobs=getattr(namespace, "jobs", 1),
                out=getattr(namespace, "out", pathlib.Path(".")),
                verbose=getattr(namespace, "verbose", False),
            )
        except ValidationError as error:
            raise UsageError(f"invalid global flags: {error}")
        except OSError as error:
            raise UsageError(f"cannot read config: {error}")
        configure_logging(context.verbose)
        return command(context, namespace)
    except CanonError as error:
        print(f"error: {error.error}", file=sys.stderr)
        return int(error.status)
    except (ValidationError, ValueError, OSError) as error:
        print(f"error: {error}", file=sys.stderr)
        return int(ExitCode.data)


if __name__ == "__main__":
    sys.exit(main())
