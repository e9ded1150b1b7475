"""
Train a graph-to-sequence model with Adam under the Noam schedule.

Gradients are accumulated over ``accum_steps`` micro-batches and normalized
by the total number of target tokens in them. Every ``checkpoint_every``
optimizer steps the model is greedily decoded on the validation set and
the checkpoint with the best top-1 accuracy is kept as ``best.g2s``.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shutil
import sys
import threading
from collections.abc import Generator, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from g2s.graph_prep import Batch, Example, collate, plan_batches
from g2s.inference import greedy_decode, topn_accuracy
from g2s.model import Graph2Seq, ModelConfig
from g2s.numeric import Tensor


logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
BEST_CHECKPOINT = "best.g2s"


class NanLoss(RuntimeError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_tokens: int = Field(default=4096, ge=1)
    accum_steps: int = Field(default=4, ge=1)
    total_steps: int = Field(default=300000, ge=1)
    noam_factor: float = Field(default=2.0, gt=0.0)
    warmup_steps: int = Field(default=8000, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int = 42
    checkpoint_every: int = Field(default=5000, ge=1)
    adam_betas: tuple[float, float] = (0.9, 0.998)
    adam_eps: float = 1e-9
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    log_every: int = Field(default=100, ge=1)
    valid_max_len: int = Field(default=512, ge=1)
    prefetch: int = Field(default=0, ge=0)
    model: ModelConfig = ModelConfig()

    @model_validator(mode="after")
    def check_steps(self) -> TrainConfig:
        if not self.total_steps > self.warmup_steps > 0:
            raise ValueError(
                f"need total_steps > warmup_steps > 0, got {self.total_steps} "
                f"and {self.warmup_steps}"
            )
        return self

    @classmethod
    def from_file(cls, path: Path) -> TrainConfig:
        return cls.model_validate_json(path.read_text(encoding="utf-8"))

    def model_with_dropout(self) -> ModelConfig:
        return self.model.with_dropout(self.dropout)


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for initialization, batch order and dropout."""
    init, order, drop = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init),
        np.random.default_rng(order),
        np.random.default_rng(drop),
    )


def noam_lr(step: int, d_model: int, factor: float, warmup: int) -> float:
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    """Adam with bias correction; the learning rate is given per step."""

    def __init__(
        self,
        params: Sequence[Tensor],
        betas: tuple[float, float] = (0.9, 0.998),
        eps: float = 1e-9,
    ) -> None:
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        beta1, beta2 = self.betas
        self.steps += 1
        correction1 = 1.0 - beta1**self.steps
        correction2 = 1.0 - beta2**self.steps
        for param, first, second in zip(self.params, self.first, self.second):
            grad = param.grad if param.grad is not None else np.zeros_like(param.data)
            first *= beta1
            first += (1.0 - beta1) * grad
            second *= beta2
            second += (1.0 - beta2) * grad * grad
            update = (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            param.data -= (lr * update).astype(param.data.dtype)


def accumulate_gradients(
    model: Graph2Seq,
    batches: Sequence[Batch],
    label_smoothing: float = 0.0,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Back-propagate the token-averaged loss of several micro-batches.

    Returns the loss value. Gradients accumulate onto existing ``grad``s.
    """
    tokens = max(sum(int(b.tgt_mask.sum()) for b in batches), 1)
    total = 0.0
    for batch in batches:
        loss = model.loss(batch, label_smoothing, rng, reduction="sum") * (1.0 / tokens)
        loss.backward()
        total += loss.item()
    return total


def _epochs(
    examples: Sequence[Example], max_tokens: int, rng: np.random.Generator
) -> Generator[Batch, None, None]:
    sizes = [ex.src_len for ex in examples]
    while True:
        for group in plan_batches(sizes, max_tokens, rng):
            yield collate([examples[i] for i in group])


def _prefetched(
    source: Generator[Batch, None, None], depth: int
) -> Generator[Batch, None, None]:
    """Assemble batches on a worker thread, handing them over in order."""
    slots: queue.Queue[Batch | Exception] = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item: Batch | Exception) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def fill() -> None:
        try:
            for batch in source:
                if not offer(batch):
                    return
        except Exception as e:
            offer(e)

    worker = threading.Thread(target=fill, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = slots.get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()


def evaluate_top1(
    model: Graph2Seq,
    examples: Sequence[Example],
    truths: Sequence[str],
    max_tokens: int = 4096,
    max_len: int = 512,
) -> float:
    """Greedy top-1 exact match after canonicalization."""
    if not examples:
        logger.warning("Empty validation set; reporting accuracy 0")
        return 0.0
    predictions: list[list[str]] = [[] for _ in examples]
    for group in plan_batches([ex.src_len for ex in examples], max_tokens):
        decoded = greedy_decode(model, collate([examples[i] for i in group]), max_len)
        for index, hyp in zip(group, decoded):
            predictions[index] = ["".join(model.vocab.decode(hyp.tokens))]
    return topn_accuracy(predictions, truths, (1,))[1]


def train(
    model: Graph2Seq,
    train_examples: Sequence[Example],
    valid_examples: Sequence[Example],
    valid_truths: Sequence[str],
    cfg: TrainConfig,
    out_dir: Path,
    progress: bool = True,
) -> Path:
    """
    Run ``cfg.total_steps`` optimizer steps and return the best checkpoint.

    :raises NanLoss: when an accumulated loss is not finite
    """
    if not train_examples:
        raise ValueError("no training examples")
    _, order_rng, dropout_rng = seed_streams(cfg.seed)
    d_model = model.cfg.decoder.d_model
    model.save_metadata(out_dir)
    metrics_path = out_dir / METRICS_FILE
    metrics_path.write_text("")
    optimizer = Adam(model.params.trainable(), cfg.adam_betas, cfg.adam_eps)
    batches = _epochs(train_examples, cfg.max_tokens, order_rng)
    if cfg.prefetch:
        batches = _prefetched(batches, cfg.prefetch)
    best_path = out_dir / BEST_CHECKPOINT
    best_accuracy = -1.0

    def record(entry: dict[str, object]) -> None:
        with metrics_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    logger.info(
        "Training on %d examples for %d steps", len(train_examples), cfg.total_steps
    )
    steps = tqdm(
        range(1, cfg.total_steps + 1),
        desc="train",
        disable=not progress or not sys.stderr.isatty(),
    )
    try:
        for step in steps:
            model.params.zero_grad()
            micro = [next(batches) for _ in range(cfg.accum_steps)]
            loss = accumulate_gradients(model, micro, cfg.label_smoothing, dropout_rng)
            if not math.isfinite(loss):
                raise NanLoss(step, loss)
            lr = noam_lr(step, d_model, cfg.noam_factor, cfg.warmup_steps)
            optimizer.step(lr)
            if step % cfg.log_every == 0:
                record({"step": step, "loss": loss, "lr": lr})
                steps.set_postfix(loss=f"{loss:.4f}")
                logger.debug("step %d loss %.4f lr %.3e", step, loss, lr)
            if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                accuracy = evaluate_top1(
                    model, valid_examples, valid_truths, cfg.max_tokens, cfg.valid_max_len
                )
                path = out_dir / f"model_{step}.g2s"
                model.params.save(path)
                record({"step": step, "valid_top1": accuracy, "checkpoint": path.name})
                logger.info("step %d: validation top-1 %.4f (%s)", step, accuracy, path.name)
                if accuracy > best_accuracy:
                    best_accuracy = accuracy
                    shutil.copyfile(path, best_path)
    finally:
        batches.close()
        steps.close()
    logger.info("Best validation top-1 %.4f", best_accuracy)
    return best_path
