"""
Decode SMILES from a trained model and score predictions.

Beam search and greedy decoding share one next-token scoring rule, so a
beam of one reproduces greedy decoding exactly.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, TypeVar

import numpy as np
import numpy.typing as npt

from g2s import numeric as nm
from g2s.chem_parse import SmilesError, canonicalize, is_valid
from g2s.decoder import BOS, EOS, PAD
from g2s.graph_prep import Batch, Example, collate
from g2s.model import Graph2Seq


logger = logging.getLogger(__name__)

DEFAULT_BEAM_SIZE = 30
DEFAULT_MAX_LEN = 512
SCORES_SUFFIX = ".scores"


class Hypothesis(NamedTuple):
    """Generated token ids (BOS excluded) and their summed log-probability."""

    tokens: tuple[int, ...]
    log_prob: float

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS


class Prediction(NamedTuple):
    smiles: str
    score: float
    tokens: tuple[int, ...]


Candidate = TypeVar("Candidate", str, Prediction)


def next_log_probs(logits: nm.Tensor) -> npt.NDArray[np.float64]:
    """Log-softmax in double precision; PAD and BOS are never proposed."""
    masked = logits.data.astype(np.float64)
    masked[:, [PAD, BOS]] = -np.inf
    return nm.log_softmax(nm.Tensor(masked)).data


def greedy_decode(model: Graph2Seq, batch: Batch, max_len: int = DEFAULT_MAX_LEN) -> list[Hypothesis]:
    """Decode every row of ``batch`` by repeatedly taking the best token."""
    limit = min(max_len, model.cfg.decoder.max_len)
    with nm.no_grad():
        memory, mask = model.encode(batch)
        state = model.decoder.start(memory, mask)
        rows = batch.batch_size
        tokens: list[list[int]] = [[] for _ in range(rows)]
        scores = np.zeros(rows)
        done = np.zeros(rows, dtype=bool)
        last = np.full(rows, BOS, dtype=np.int64)
        for _ in range(limit):
            logits, state = model.decoder.step(state, last)
            totals = scores[:, None] + next_log_probs(logits)
            choice = totals.argmax(axis=1)
            for row in np.flatnonzero(~done):
                tokens[row].append(int(choice[row]))
                scores[row] = totals[row, choice[row]]
            done |= choice == EOS
            if done.all():
                break
            last = choice
    return [Hypothesis(tuple(t), float(s)) for t, s in zip(tokens, scores)]


def beam_search(
    model: Graph2Seq,
    batch: Batch,
    beam_size: int = DEFAULT_BEAM_SIZE,
    max_len: int = DEFAULT_MAX_LEN,
    length_penalty: float = 0.0,
) -> list[Prediction]:
    """
    Length-complete beam search for the single input in ``batch``.

    Each step keeps the ``beam_size`` best expansions of the live
    hypotheses; expansions ending in EOS retire to the result pool. Ties
    are broken by the rank of the parent hypothesis, then by token id.

    :param length_penalty: rank finished hypotheses by ``score / len ** alpha``
    """
    if batch.batch_size != 1:
        raise ValueError(f"beam_search takes one input, got {batch.batch_size}")
    limit = min(max_len, model.cfg.decoder.max_len)
    pool: list[Hypothesis] = []
    with nm.no_grad():
        memory, mask = model.encode(batch)
        state = model.decoder.start(memory, mask)
        live: list[tuple[int, ...]] = [()]
        scores = np.zeros(1)
        for _ in range(limit):
            last = [hyp[-1] if hyp else BOS for hyp in live]
            logits, state = model.decoder.step(state, last)
            totals = (scores[:, None] + next_log_probs(logits)).ravel()
            vocab = logits.shape[-1]
            parent, token = np.divmod(np.arange(totals.size), vocab)
            order = np.lexsort((token, parent, -totals))[:beam_size]
            survivors: list[tuple[int, ...]] = []
            survivor_scores: list[float] = []
            rows: list[int] = []
            for flat in order:
                if not np.isfinite(totals[flat]):
                    break
                hyp = live[parent[flat]] + (int(token[flat]),)
                if token[flat] == EOS:
                    pool.append(Hypothesis(hyp, float(totals[flat])))
                else:
                    survivors.append(hyp)
                    survivor_scores.append(float(totals[flat]))
                    rows.append(int(parent[flat]))
            if not survivors:
                break
            live, scores = survivors, np.array(survivor_scores)
            state = state.select(rows)

    def rank(hyp: Hypothesis) -> tuple[float, tuple[int, ...]]:
        score = hyp.log_prob
        if length_penalty:
            score /= len(hyp.tokens) ** length_penalty
        return -score, hyp.tokens

    return [
        Prediction("".join(model.vocab.decode(hyp.tokens)), -rank(hyp)[0], hyp.tokens)
        for hyp in sorted(pool, key=rank)
    ]


def filter_valid(candidates: Iterable[Candidate]) -> list[Candidate]:
    """Keep candidates whose SMILES parses, in their original order."""
    kept = []
    for candidate in candidates:
        smiles = candidate if isinstance(candidate, str) else candidate.smiles
        if is_valid(smiles):
            kept.append(candidate)
        else:
            logger.debug("Dropping invalid candidate %r", smiles)
    return kept


@lru_cache(maxsize=65536)
def _canonical(smiles: str) -> str | None:
    try:
        return canonicalize(smiles)
    except SmilesError:
        return None


def deduplicate(predictions: Iterable[Prediction]) -> list[Prediction]:
    """Keep the first (best ranked) spelling of each molecule."""
    seen: set[str] = set()
    kept = []
    for prediction in predictions:
        key = _canonical(prediction.smiles) or prediction.smiles
        if key not in seen:
            seen.add(key)
            kept.append(prediction)
    return kept


def topn_accuracy(
    predictions: Sequence[Sequence[str]],
    truths: Sequence[str],
    n_values: Sequence[int] = (1, 3, 5, 10),
) -> dict[int, float]:
    """Fraction of examples whose truth is among the first ``n`` candidates."""
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction rows for {len(truths)} truths")
    hits = dict.fromkeys(n_values, 0)
    for candidates, truth in zip(predictions, truths):
        target = _canonical(truth)
        if target is None:
            logger.warning("Ground truth %r does not parse; counted as a miss", truth)
            continue
        position = next(
            (i for i, smiles in enumerate(candidates) if _canonical(smiles) == target),
            None,
        )
        if position is None:
            continue
        for n in n_values:
            if position < n:
                hits[n] += 1
    total = len(truths)
    return {n: hits[n] / total if total else 0.0 for n in n_values}


def predict(
    model: Graph2Seq,
    examples: Sequence[Example],
    beam_size: int = DEFAULT_BEAM_SIZE,
    max_len: int = DEFAULT_MAX_LEN,
    n_best: int | None = None,
    length_penalty: float = 0.0,
    workers: int = 1,
) -> list[list[Prediction]]:
    """Beam-decode each example, drop invalid and duplicate candidates."""

    def run(example: Example) -> list[Prediction]:
        found = beam_search(model, collate([example]), beam_size, max_len, length_penalty)
        return deduplicate(filter_valid(found))[:n_best]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(run, examples))
    return [run(example) for example in examples]


def scores_path(path: Path) -> Path:
    return path.with_name(path.name + SCORES_SUFFIX)


def write_predictions(path: Path, predictions: Sequence[Sequence[Prediction]]) -> None:
    """One line per input with tab-separated candidates; scores go alongside."""
    path.write_text(
        "".join("\t".join(p.smiles for p in row) + "\n" for row in predictions),
        encoding="utf-8",
    )
    scores_path(path).write_text(
        "".join("\t".join(f"{p.score:.6f}" for p in row) + "\n" for row in predictions),
        encoding="utf-8",
    )


def read_predictions(path: Path) -> list[list[str]]:
    return [
        line.split("\t") if line else []
        for line in path.read_text(encoding="utf-8").splitlines()
    ]
