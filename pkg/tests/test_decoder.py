from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from g2s.decoder import (
    BOS,
    EOS,
    PAD,
    SPECIAL_TOKENS,
    UNK,
    Decoder,
    DecoderConfig,
    PrefixTooLong,
    Vocab,
    relative_positions,
)
from g2s.numeric import ModelParams, Tensor


VOCAB_SIZE = 10


def decoder(max_len: int = 64, seed: int = 0) -> tuple[Decoder, Tensor, np.ndarray]:
    cfg = DecoderConfig(layers=2, heads=2, d_model=8, ffn=16, dropout=0.0, max_len=max_len)
    params = ModelParams(np.random.default_rng(seed), np.float64)
    rng = np.random.default_rng(seed + 1)
    memory = Tensor(rng.normal(size=(2, 3, 8)))
    mask = np.array([[True, True, True], [True, True, False]])
    return Decoder(params, cfg, VOCAB_SIZE), memory, mask


def prefix(*tokens: int) -> np.ndarray:
    return np.array([[BOS, *tokens]] * 2, dtype=np.int64)


def test_vocab_build_orders_by_frequency() -> None:
    vocab = Vocab.build([["C", "C", "O"], ["O", "N"], ["Cl"]])
    assert vocab.tokens == [*SPECIAL_TOKENS, "C", "O", "N", "Cl"]
    assert vocab.encode(["C", "N", "Br"]).tolist() == [4, 6, UNK, EOS]
    assert vocab.encode(["O"], add_eos=False).tolist() == [5]


def test_vocab_decode_stops_at_eos() -> None:
    vocab = Vocab.build([["C", "O"]])
    assert vocab.decode([BOS, 4, 5, EOS, 4]) == ["C", "O"]
    assert vocab.decode([PAD, 4]) == ["C"]


def test_vocab_save_load(tmp_path: Path) -> None:
    vocab = Vocab.build([["C", "(", "=", "O", ")", "O"]])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == vocab
    assert (tmp_path / "vocab.txt").read_text().splitlines()[:4] == list(SPECIAL_TOKENS)


def test_vocab_save_load_keeps_unusual_separators(tmp_path: Path) -> None:
    vocab = Vocab.build([["C", "\r", "\x85", "\u2028", "\x1c"]])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == vocab


def test_vocab_rejects_bad_token_lists() -> None:
    with pytest.raises(ValueError):
        Vocab(["C", "O"])
    with pytest.raises(ValueError):
        Vocab([*SPECIAL_TOKENS, "C", "C"])
    with pytest.raises(ValueError):
        Vocab([*SPECIAL_TOKENS, "C\nO"])


def test_relative_positions_clip() -> None:
    table = relative_positions(np.arange(7), np.arange(7), 4)
    assert table[0, 6] == 8
    assert table[6, 0] == 0
    assert table[3, 3] == 4
    assert table[2, 4] == 6


def test_later_tokens_do_not_change_earlier_logits() -> None:
    dec, memory, mask = decoder()
    short = dec.forward(memory, mask, prefix(4)).data
    long = dec.forward(memory, mask, prefix(4, 5, 6, 7)).data
    np.testing.assert_allclose(long[:, :2], short, rtol=0, atol=1e-12)


def test_incremental_steps_match_full_prefix() -> None:
    dec, memory, mask = decoder()
    tokens = [BOS, 4, 5, 6, 4, 7, 8, 9, 4, 5, 6, 7]
    state = dec.start(memory, mask)
    for length, token in enumerate(tokens, start=1):
        logits, state = dec.step(state, [token, token])
        full = dec.decode_step(memory, mask, np.array([tokens[:length]] * 2))
        np.testing.assert_allclose(logits.data, full.data, atol=1e-10)
    assert state.length == len(tokens)


def test_state_select_follows_rows() -> None:
    dec, memory, mask = decoder()
    state = dec.start(memory, mask)
    _, state = dec.step(state, [4, 5])
    picked = state.select([1, 1, 0])
    logits, _ = dec.step(picked, [6, 6, 6])
    _, direct = dec.step(dec.start(memory, mask), [4, 5])
    expected, _ = dec.step(direct, [6, 6])
    np.testing.assert_allclose(logits.data[[2, 0]], expected.data, atol=1e-12)
    np.testing.assert_allclose(logits.data[1], expected.data[1], atol=1e-12)


def test_distant_history_still_matters() -> None:
    dec, memory, mask = decoder()
    tail = [4, 5, 6, 7, 8, 9, 4, 5, 6]
    first = dec.decode_step(memory, mask, prefix(4, *tail)).data
    second = dec.decode_step(memory, mask, prefix(5, *tail)).data
    assert not np.allclose(first, second)


def test_decode_step_requires_bos() -> None:
    dec, memory, mask = decoder()
    with pytest.raises(ValueError):
        dec.decode_step(memory, mask, np.array([[4, 5], [4, 5]]))
    with pytest.raises(ValueError):
        dec.decode_step(memory, mask, np.zeros((2, 0), dtype=np.int64))


def test_prefix_too_long() -> None:
    dec, memory, mask = decoder(max_len=3)
    dec.decode_step(memory, mask, prefix(4, 5))
    with pytest.raises(PrefixTooLong):
        dec.decode_step(memory, mask, prefix(4, 5, 6))
    state = dec.start(memory, mask)
    for token in (BOS, 4, 5):
        _, state = dec.step(state, [token, token])
    with pytest.raises(PrefixTooLong):
        dec.step(state, [6, 6])


def test_uniform_logits_give_log_vocab() -> None:
    dec, memory, mask = decoder()
    dec.output.weight.data[:] = 0.0
    tgt = np.array([[4, 5, EOS], [6, EOS, PAD]])
    loss = dec.train_forward(memory, mask, tgt, tgt != PAD)
    assert loss.item() == pytest.approx(math.log(VOCAB_SIZE))


def test_confident_correct_logits_give_zero_loss() -> None:
    dec, memory, mask = decoder()
    dec.output.weight.data[:] = 0.0
    dec.output.bias.data[EOS] = 100.0  # type: ignore[union-attr]
    tgt = np.array([[EOS], [EOS]])
    assert dec.train_forward(memory, mask, tgt, tgt != PAD).item() < 1e-30


def test_loss_ignores_trailing_padding() -> None:
    dec, memory, mask = decoder()
    tgt = np.array([[4, 5, EOS], [6, 7, EOS]])
    padded = np.concatenate([tgt, np.full((2, 2), PAD)], axis=1)
    plain = dec.train_forward(memory, mask, tgt, tgt != PAD).item()
    assert dec.train_forward(memory, mask, padded, padded != PAD).item() == pytest.approx(plain)


def test_padded_memory_is_ignored() -> None:
    dec, memory, mask = decoder()
    before = dec.forward(memory, mask, prefix(4, 5)).data
    memory.data[1, 2] = 1e3
    np.testing.assert_allclose(dec.forward(memory, mask, prefix(4, 5)).data, before, atol=1e-12)
