"""
Reaction dataset files.

Raw files hold one reaction per line as ``reactants>reagents>products``.
Preprocessing writes, per split, ``src.txt`` and ``tgt.txt`` (source and
target SMILES), ``src_lens.npy``, ``tgt_ids.npy`` and ``tgt_offsets.npy``,
plus one ``vocab.txt`` built from the training targets.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from g2s.chem_parse import SmilesError, parse, tokenize
from g2s.decoder import Vocab
from g2s.graph_prep import Example, featurize


logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
VOCAB_FILE = "vocab.txt"


class DatasetError(ValueError):
    """A dataset file or preprocessed directory that cannot be used."""


class Direction(StrEnum):
    FORWARD = "forward"
    RETRO = "retro"


class ReactionRecord(NamedTuple):
    reactants: str
    reagents: str
    products: str
    direction: Direction = Direction.FORWARD

    def source(self, separated: bool = False) -> str:
        """
        Model input. Forward sources merge reagents into the reactants
        unless ``separated``, in which case reagents are left out.
        """
        if self.direction is Direction.RETRO:
            return self.products
        if self.reagents and not separated:
            return f"{self.reactants}.{self.reagents}"
        return self.reactants

    @property
    def target(self) -> str:
        return self.reactants if self.direction is Direction.RETRO else self.products


class SplitData(NamedTuple):
    examples: list[Example]
    sources: list[str]
    targets: list[str]


class _Processed(NamedTuple):
    source: str
    target: str
    src_len: int
    tgt_tokens: list[str]


def parse_reaction(line: str, direction: Direction = Direction.FORWARD) -> ReactionRecord:
    """
    :raises DatasetError: if the line is not ``a>b>c`` with non-empty ends
    :raises SmilesError: if a field does not parse
    """
    fields = line.strip().split(">")
    if len(fields) != 3:
        raise DatasetError(f"expected 'reactants>reagents>products', got {line.strip()!r}")
    reactants, reagents, products = (field.strip() for field in fields)
    if not reactants or not products:
        raise DatasetError("empty reactants or products")
    for smiles in (reactants, reagents, products):
        if smiles:
            parse(smiles)
    return ReactionRecord(reactants, reagents, products, direction)


def read_reactions(
    path: Path, direction: Direction = Direction.FORWARD
) -> list[ReactionRecord]:
    """Read the parseable reactions of a file, logging every rejected line."""
    records = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for number, line in enumerate(lines, start=1):
        try:
            records.append(parse_reaction(line, direction))
        except (DatasetError, SmilesError) as e:
            logger.warning("%s:%d: skipped: %s", path, number, e)
    logger.info("%s: kept %d/%d reactions", path, len(records), len(lines))
    return records


def _process_line(args: tuple[str, Direction, bool]) -> _Processed | str:
    line, direction, separated = args
    try:
        record = parse_reaction(line, direction)
    except (DatasetError, SmilesError) as e:
        return str(e)
    source = record.source(separated)
    return _Processed(source, record.target, len(tokenize(source)), tokenize(record.target))


def process_file(
    path: Path,
    direction: Direction = Direction.FORWARD,
    separated: bool = False,
    workers: int = 1,
) -> list[_Processed]:
    """Parse and tokenize every line of a raw file, in input order."""
    lines = path.read_text(encoding="utf-8").splitlines()
    jobs = [(line, direction, separated) for line in lines]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_process_line, jobs, chunksize=256))
    else:
        results = [_process_line(job) for job in jobs]
    kept = []
    for number, result in enumerate(results, start=1):
        if isinstance(result, str):
            logger.warning("%s:%d: skipped: %s", path, number, result)
        else:
            kept.append(result)
    logger.info("%s: kept %d/%d reactions", path, len(kept), len(lines))
    if lines and not kept:
        raise DatasetError(f"{path}: no usable reaction")
    return kept


def save_split(directory: Path, rows: Sequence[_Processed], vocab: Vocab) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "src.txt").write_text(
        "".join(f"{row.source}\n" for row in rows), encoding="utf-8"
    )
    (directory / "tgt.txt").write_text(
        "".join(f"{row.target}\n" for row in rows), encoding="utf-8"
    )
    encoded = [vocab.encode(row.tgt_tokens) for row in rows]
    lengths = np.array([len(ids) for ids in encoded], dtype=np.int64)
    np.save(directory / "src_lens.npy", np.array([row.src_len for row in rows], dtype=np.int64))
    np.save(directory / "tgt_offsets.npy", np.concatenate([[0], np.cumsum(lengths)]))
    np.save(
        directory / "tgt_ids.npy",
        np.concatenate(encoded) if encoded else np.zeros(0, dtype=np.int64),
    )


def preprocess(
    input_dir: Path,
    output_dir: Path,
    direction: Direction = Direction.FORWARD,
    separated: bool = False,
    workers: int = 1,
) -> dict[str, int]:
    """
    Preprocess ``{train,valid,test}.txt`` from ``input_dir``.

    Only ``train.txt`` is required. Returns the kept count per split.

    :raises DatasetError: if ``train.txt`` is missing or unusable
    """
    train_path = input_dir / "train.txt"
    if not train_path.is_file():
        raise DatasetError(f"{train_path} not found")
    processed = {
        split: process_file(input_dir / f"{split}.txt", direction, separated, workers)
        for split in SPLITS
        if (input_dir / f"{split}.txt").is_file()
    }
    if not processed["train"]:
        raise DatasetError(f"{train_path}: no usable reaction")
    vocab = Vocab.build(row.tgt_tokens for row in processed["train"])
    output_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(output_dir / VOCAB_FILE)
    for split, rows in processed.items():
        save_split(output_dir / split, rows, vocab)
    logger.info("Vocabulary of %d tokens written to %s", len(vocab), output_dir)
    return {split: len(rows) for split, rows in processed.items()}


def make_example(source: str, tgt_ids: npt.NDArray[np.int64]) -> Example:
    return Example(featurize(parse(source)), len(tokenize(source)), tgt_ids)


def load_split(directory: Path) -> SplitData:
    """
    :raises DatasetError: if files are missing or inconsistent
    """
    try:
        sources = (directory / "src.txt").read_text(encoding="utf-8").splitlines()
        targets = (directory / "tgt.txt").read_text(encoding="utf-8").splitlines()
        offsets = np.load(directory / "tgt_offsets.npy")
        ids = np.load(directory / "tgt_ids.npy")
        src_lens = np.load(directory / "src_lens.npy")
    except OSError as e:
        raise DatasetError(f"{directory}: {e}") from e
    if not len(sources) == len(targets) == len(src_lens) == len(offsets) - 1:
        raise DatasetError(f"{directory}: split files disagree in length")
    try:
        examples = [
            Example(featurize(parse(source)), int(src_len), ids[start:end])
            for source, src_len, start, end in zip(sources, src_lens, offsets[:-1], offsets[1:])
        ]
    except SmilesError as e:
        raise DatasetError(f"{directory}: {e}") from e
    return SplitData(examples, sources, targets)


def load_vocab(directory: Path) -> Vocab:
    path = directory / VOCAB_FILE
    if not path.is_file():
        raise DatasetError(f"{path} not found")
    return Vocab.load(path)
