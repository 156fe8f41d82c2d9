import numpy as np
import pytest
import torch

from bimt.data import IGNORE_INDEX, MaskedBatch
from bimt.errors import DataError, VocabMismatchError
from bimt.mlm import (LMCheckpoint, PretrainConfig, init_lm, lm_config, masked_accuracy, masked_lm_objective,
                      mlm_loss, pack_segments, pretrain)
from bimt.subword import BOS_ID, EOS_ID, SPECIALS, SubwordVocab, train_vocab


def test_pack_segments():
    segs = pack_segments([[5, 6], [7], [8, 9, 10]], max_len=6)
    assert segs == [[BOS_ID, 5, 6, EOS_ID, 7, EOS_ID], [BOS_ID, 8, 9, 10, EOS_ID]]
    assert all(len(s) <= 6 for s in pack_segments([[5] * 10, [6] * 3], 6))


def test_objective_hand_case():
    logits = torch.log(torch.tensor([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.3, 0.4]], dtype=torch.float64))
    labels = torch.tensor([0, 1, IGNORE_INDEX])
    loss, acc = masked_lm_objective(logits, labels)
    assert loss.item() == pytest.approx(-(np.log(0.7) + np.log(0.1)) / 2)
    assert acc == 0.5
    with pytest.raises(DataError):
        masked_lm_objective(logits, torch.full((3,), IGNORE_INDEX))


def test_loss_starts_near_uniform():
    vocab = SubwordVocab(SPECIALS + tuple(f"w{i}" for i in range(95)))
    cfg = lm_config(hidden_dim=16, ffn_dim=32, num_heads=2, num_layers=1, dropout_p=0.0)
    params = init_lm(vocab.size, cfg, seed=0)
    ids = np.random.default_rng(0).integers(5, vocab.size, size=(4, 20))
    labels = ids.copy()
    batch = MaskedBatch(ids, labels, np.ones_like(ids))
    loss, _ = mlm_loss(batch, params, cfg)
    assert abs(loss.item() - np.log(vocab.size)) < 0.2


def test_pretraining_reduces_loss(toy_lm):
    meta = toy_lm.meta
    assert meta["final_loss"] < meta["initial_loss"]
    assert toy_lm.params.trainable() == []


def test_pretraining_is_deterministic():
    lines = ["ta kala mo", "der hund lauft", "nu pesa ri", "die katze"] * 5
    vocab = train_vocab(lines, 40)
    cfg = lm_config(hidden_dim=16, ffn_dim=32, num_heads=2, num_layers=2)
    opt = PretrainConfig(steps=5, warmup=1, batch_tokens=64, log_interval=1)
    a = pretrain(lines, vocab, cfg, opt, seed=3)
    b = pretrain(lines, vocab, cfg, opt, seed=3)
    assert a.meta["history"] == b.meta["history"]
    for name in a.params:
        assert torch.equal(a.params[name].tensor, b.params[name].tensor)


def test_empty_corpus():
    vocab = SubwordVocab(SPECIALS + ("a",))
    with pytest.raises(DataError):
        pretrain(["", "  "], vocab, lm_config())


def test_checkpoint_roundtrip(toy_lm, tmp_path, toy_pairs):
    path = tmp_path / "lm.bmt"
    toy_lm.save(path)
    back = LMCheckpoint.load(path, expect_vocab=toy_lm.vocab)
    assert back.vocab == toy_lm.vocab and back.config == toy_lm.config
    ids = torch.tensor([[BOS_ID, 7, 9, 11, EOS_ID]])
    for x, y in zip(toy_lm.stack(ids).layers, back.stack(ids).layers):
        assert torch.equal(x, y)
    lines = [s for pair in toy_pairs[0][:50] for s in pair]
    assert masked_accuracy(back, lines) == masked_accuracy(toy_lm, lines)


def test_checkpoint_vocab_mismatch(toy_lm, tmp_path):
    path = tmp_path / "lm.bmt"
    toy_lm.save(path)
    other = SubwordVocab(SPECIALS + ("x", "y"))
    with pytest.raises(VocabMismatchError):
        LMCheckpoint.load(path, expect_vocab=other)
