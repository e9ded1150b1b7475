"""
Train and run graph-to-SMILES translation models.

Subcommands:

    preprocess  parse raw reaction files and build the vocabulary
    synth       write and preprocess a synthetic task
    train       train a model on a preprocessed directory
    predict     beam-decode source SMILES with a trained model
    score       top-n exact-match accuracy of a prediction file
    ablate      train and compare the full model against its ablations
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from g2s.chem_parse import SmilesError
from g2s.data import (
    DatasetError,
    Direction,
    load_split,
    load_vocab,
    make_example,
    preprocess,
)
from g2s.graph_prep import Example
from g2s.inference import (
    DEFAULT_BEAM_SIZE,
    DEFAULT_MAX_LEN,
    Prediction,
    predict,
    read_predictions,
    topn_accuracy,
    write_predictions,
)
from g2s.model import Graph2Seq
from g2s.synth import SynthTask, SynthTaskSpec, generate_synthetic
from g2s.training import TrainConfig, seed_streams, train


logger = logging.getLogger(__name__)

N_VALUES = (1, 3, 5, 10)
ABLATIONS = {
    "full": {"use_rel_pos": True, "use_global": True},
    "no-positional-embedding": {"use_rel_pos": False, "use_global": True},
    "no-global-encoder": {"use_rel_pos": True, "use_global": False},
}
_LOG_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def _n_values(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"n values must be positive: {text!r}")
    return values


def load_train_config(path: Path | None, **overrides: object) -> TrainConfig:
    """Read a training config and apply the non-None overrides."""
    cfg = TrainConfig.from_file(path) if path else TrainConfig()
    updates = {key: value for key, value in overrides.items() if value is not None}
    if not updates:
        return cfg
    return TrainConfig.model_validate({**cfg.model_dump(), **updates})


def run_training(
    data_dir: Path,
    out_dir: Path,
    cfg: TrainConfig,
    progress: bool = True,
) -> Path:
    """Train on ``data_dir/train`` with ``data_dir/valid`` for selection."""
    vocab = load_vocab(data_dir)
    train_split = load_split(data_dir / "train")
    if (data_dir / "valid").is_dir():
        valid_split = load_split(data_dir / "valid")
        valid_examples, valid_truths = valid_split.examples, valid_split.targets
    else:
        logger.warning("%s has no valid split; checkpoints score 0", data_dir)
        valid_examples, valid_truths = [], []
    init_rng, _, _ = seed_streams(cfg.seed)
    model = Graph2Seq(cfg.model_with_dropout(), vocab, init_rng)
    return train(
        model,
        train_split.examples,
        valid_examples,
        valid_truths,
        cfg,
        out_dir,
        progress=progress,
    )


def _source_examples(lines: Sequence[str]) -> list[Example | None]:
    examples: list[Example | None] = []
    for number, line in enumerate(lines, start=1):
        try:
            examples.append(make_example(line.strip(), np.zeros(0, dtype=np.int64)))
        except SmilesError as e:
            logger.warning("source line %d skipped: %s", number, e)
            examples.append(None)
    return examples


def _cmd_preprocess(args: argparse.Namespace) -> int:
    counts = preprocess(
        args.input,
        args.output,
        direction=args.direction,
        separated=args.separated,
        workers=args.workers,
    )
    for split, count in counts.items():
        print(f"{split}: {count}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.config:
        spec = SynthTaskSpec.model_validate_json(args.config.read_text(encoding="utf-8"))
    else:
        spec = SynthTaskSpec(
            task=args.task,
            n_train=args.n_train,
            n_valid=args.n_valid,
            n_test=args.n_test,
            max_atoms=args.max_atoms,
            seed=args.seed,
        )
    generate_synthetic(spec, args.out)
    counts = preprocess(args.out, args.out, workers=args.workers)
    for split, count in counts.items():
        print(f"{split}: {count}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config, seed=args.seed, total_steps=args.total_steps)
    best = run_training(args.data, args.out, cfg, progress=not args.quiet)
    print(best)
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    model = Graph2Seq.load(args.model, args.checkpoint)
    lines = args.src.read_text(encoding="utf-8").splitlines()
    examples = _source_examples(lines)
    decoded = iter(
        predict(
            model,
            [ex for ex in examples if ex is not None],
            beam_size=args.beam_size,
            max_len=args.max_len,
            n_best=args.n_best,
            length_penalty=args.length_penalty,
            workers=args.workers,
        )
    )
    rows: list[list[Prediction]] = [[] if ex is None else next(decoded) for ex in examples]
    write_predictions(args.out, rows)
    logger.info("Wrote predictions for %d inputs to %s", len(rows), args.out)
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    predictions = read_predictions(args.pred)
    truths = args.truth.read_text(encoding="utf-8").splitlines()
    accuracy = topn_accuracy(predictions, truths, args.n)
    for n, value in accuracy.items():
        print(f"top-{n}: {value:.4f}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config, seed=args.seed, total_steps=args.total_steps)
    test = load_split(args.data / "test")
    results: dict[str, dict[int, float]] = {}
    for name, switches in ABLATIONS.items():
        logger.info("Training configuration %s", name)
        ablated = cfg.model_copy(update={"model": cfg.model.ablated(**switches)})
        best = run_training(args.data, args.out / name, ablated, progress=not args.quiet)
        model = Graph2Seq.load(best.parent, best.name)
        rows = predict(model, test.examples, args.beam_size, args.max_len, workers=args.workers)
        results[name] = topn_accuracy(
            [[p.smiles for p in row] for row in rows], test.targets, N_VALUES
        )
    print(f"{'configuration':<26}" + "".join(f"{f'top-{n}':>8}" for n in N_VALUES))
    for name, accuracy in results.items():
        print(f"{name:<26}" + "".join(f"{accuracy[n]:>8.4f}" for n in N_VALUES))
    return 0


def make_arg_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    parser = argparse.ArgumentParser(
        prog="g2s",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="log progress (-v) or debugging detail (-vv)",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub = commands.add_parser("preprocess", help="build vocabulary and split files")
    sub.add_argument("--input", type=Path, required=True, help="directory of {split}.txt")
    sub.add_argument("--output", type=Path, required=True, help="output directory")
    sub.add_argument(
        "--direction", type=Direction, choices=list(Direction), default=Direction.FORWARD
    )
    sub.add_argument(
        "--separated", action="store_true", help="keep reagents out of the source graph"
    )
    sub.add_argument("--workers", type=int, default=1, help="parallel parsing processes")
    sub.set_defaults(func=_cmd_preprocess)

    sub = commands.add_parser("synth", help="generate a synthetic task")
    sub.add_argument("--out", type=Path, required=True, help="output directory")
    sub.add_argument("--config", type=Path, help="JSON task spec; overrides the flags")
    sub.add_argument(
        "--task", type=SynthTask, choices=list(SynthTask), default=SynthTask.HALIDE_SWAP
    )
    sub.add_argument("--n-train", type=int, default=2000)
    sub.add_argument("--n-valid", type=int, default=200)
    sub.add_argument("--n-test", type=int, default=200)
    sub.add_argument("--max-atoms", type=int, default=12)
    sub.add_argument("--seed", type=int, default=7)
    sub.add_argument("--workers", type=int, default=1)
    sub.set_defaults(func=_cmd_synth)

    for name, func, help_text in (
        ("train", _cmd_train, "train a model"),
        ("ablate", _cmd_ablate, "compare the full model with its ablations"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--data", type=Path, required=True, help="preprocessed directory")
        sub.add_argument("--out", type=Path, required=True, help="run directory")
        sub.add_argument("--config", type=Path, help="JSON training config")
        sub.add_argument("--seed", type=int, help="override the config seed")
        sub.add_argument("--total-steps", type=int, help="override the step count")
        sub.add_argument("--quiet", action="store_true", help="no progress bar")
        if name == "ablate":
            sub.add_argument("--beam-size", type=int, default=DEFAULT_BEAM_SIZE)
            sub.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
            sub.add_argument("--workers", type=int, default=1)
        sub.set_defaults(func=func)

    sub = commands.add_parser("predict", help="beam-decode source SMILES")
    sub.add_argument("--model", type=Path, required=True, help="model directory")
    sub.add_argument("--checkpoint", help="checkpoint file name inside the model directory")
    sub.add_argument("--src", type=Path, required=True, help="one source SMILES per line")
    sub.add_argument("--out", type=Path, required=True, help="prediction file")
    sub.add_argument("--beam-size", type=int, default=DEFAULT_BEAM_SIZE)
    sub.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    sub.add_argument("--n-best", type=int, help="candidates kept per input")
    sub.add_argument("--length-penalty", type=float, default=0.0)
    sub.add_argument("--workers", type=int, default=1, help="decoding threads")
    sub.set_defaults(func=_cmd_predict)

    sub = commands.add_parser("score", help="top-n accuracy of predictions")
    sub.add_argument("--pred", type=Path, required=True, help="prediction file")
    sub.add_argument("--truth", type=Path, required=True, help="one SMILES per line")
    sub.add_argument("--n", type=_n_values, default=N_VALUES, help="e.g. 1,3,5,10")
    sub.set_defaults(func=_cmd_score)
    return parser


def main(*args: str) -> int:
    """
    Process command line arguments and run the subcommand.

    :param args: command line arguments
    """
    parsed_args = make_arg_parser().parse_args(args=args or None)
    logging.basicConfig(
        level=_LOG_LEVELS[min(parsed_args.verbose, len(_LOG_LEVELS) - 1)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return int(parsed_args.func(parsed_args))
    except (DatasetError, SmilesError) as e:
        logger.error("%s", e)
    except (ValueError, RuntimeError, OSError) as e:
        logger.error("%s: %s", type(e).__name__, e)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
