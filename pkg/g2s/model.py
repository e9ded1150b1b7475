"""Graph-to-sequence model: local encoder, global encoder and decoder."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, model_validator

from g2s import numeric as nm
from g2s.decoder import BOS, Decoder, DecoderConfig, Vocab
from g2s.encoder_global import GlobalEncoder, GlobalEncoderConfig
from g2s.encoder_local import DmpnnConfig, LocalEncoder
from g2s.graph_prep import Batch
from g2s.numeric import ModelParams, Tensor


logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.txt"
CHECKPOINT_SUFFIX = ".g2s"


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder_local: DmpnnConfig = DmpnnConfig()
    encoder_global: GlobalEncoderConfig = GlobalEncoderConfig()
    decoder: DecoderConfig = DecoderConfig()

    @model_validator(mode="after")
    def check_widths(self) -> ModelConfig:
        widths = {
            self.encoder_local.hidden,
            self.encoder_global.d_model,
            self.decoder.d_model,
        }
        if len(widths) != 1:
            raise ValueError(f"encoder and decoder widths differ: {sorted(widths)}")
        return self

    def with_dropout(self, dropout: float) -> ModelConfig:
        return self.model_copy(
            update={
                "encoder_global": self.encoder_global.model_copy(update={"dropout": dropout}),
                "decoder": self.decoder.model_copy(update={"dropout": dropout}),
            }
        )

    def ablated(self, *, use_rel_pos: bool = True, use_global: bool = True) -> ModelConfig:
        return self.model_copy(
            update={
                "encoder_global": self.encoder_global.model_copy(
                    update={"use_rel_pos": use_rel_pos, "use_global": use_global}
                )
            }
        )


class Graph2Seq:
    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocab,
        rng: np.random.Generator | int = 0,
        dtype: npt.DTypeLike = np.float32,
    ) -> None:
        self.cfg = cfg
        self.vocab = vocab
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.params = ModelParams(rng, dtype)
        self.local = LocalEncoder(self.params, cfg.encoder_local)
        self.global_encoder = GlobalEncoder(self.params, cfg.encoder_global)
        self.decoder = Decoder(self.params, cfg.decoder, len(vocab))
        logger.debug("Built model with %d parameters", self.params.num_elements())

    def encode(
        self, batch: Batch, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, npt.NDArray[np.bool_]]:
        """Return the ``(B, N, d_model)`` memory and its atom mask."""
        h_local = self.local(batch, rng)
        return self.global_encoder(h_local, batch, rng), batch.atom_mask

    def loss(
        self,
        batch: Batch,
        label_smoothing: float = 0.0,
        rng: np.random.Generator | None = None,
        reduction: str = "mean",
    ) -> Tensor:
        memory, mask = self.encode(batch, rng)
        return self.decoder.train_forward(
            memory, mask, batch.tgt_ids, batch.tgt_mask, label_smoothing, rng, reduction
        )

    def log_likelihood(self, batch: Batch) -> npt.NDArray[np.float64]:
        """Summed log-probability of each target sequence, without smoothing."""
        with nm.no_grad():
            memory, mask = self.encode(batch)
            inputs = np.concatenate(
                [np.full((batch.batch_size, 1), BOS, dtype=np.int64), batch.tgt_ids[:, :-1]], axis=1
            )
            logits = self.decoder.forward(memory, mask, inputs).data
        logp = nm.log_softmax(Tensor(logits.astype(np.float64))).data
        picked = np.take_along_axis(logp, batch.tgt_ids[..., None], axis=-1)[..., 0]
        return (picked * batch.tgt_mask).sum(axis=1)

    def save_metadata(self, directory: Path) -> None:
        """Write ``config.json`` and ``vocab.txt``."""
        directory.mkdir(parents=True, exist_ok=True)
        (directory / CONFIG_FILE).write_text(self.cfg.model_dump_json(indent=2) + "\n")
        self.vocab.save(directory / VOCAB_FILE)

    def save(self, directory: Path, checkpoint: str = "model.g2s") -> Path:
        """Write the metadata and a checkpoint; return the checkpoint path."""
        self.save_metadata(directory)
        path = directory / checkpoint
        self.params.save(path)
        return path

    @classmethod
    def load(
        cls,
        directory: Path,
        checkpoint: str | None = None,
        dtype: npt.DTypeLike = np.float32,
    ) -> Graph2Seq:
        """
        Load a model directory. Without ``checkpoint``, ``best.g2s`` is used
        if present, else the only ``*.g2s`` file.

        :raises numeric.CheckpointError: if no unique checkpoint is found
        """
        cfg = ModelConfig.model_validate_json((directory / CONFIG_FILE).read_text())
        vocab = Vocab.load(directory / VOCAB_FILE)
        if checkpoint is None:
            if (directory / "best.g2s").exists():
                checkpoint = "best.g2s"
            else:
                found = sorted(directory.glob(f"*{CHECKPOINT_SUFFIX}"))
                if len(found) != 1:
                    raise nm.CheckpointError(
                        f"{directory}: expected one checkpoint, found {len(found)}"
                    )
                checkpoint = found[0].name
        model = cls(cfg, vocab, dtype=dtype)
        model.params.load(directory / checkpoint)
        logger.info("Loaded %s", directory / checkpoint)
        return model
