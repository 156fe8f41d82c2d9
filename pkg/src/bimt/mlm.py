"""Bilingual masked-LM pretraining (RoBERTa-style: dynamic masking, no NSP)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import numcore as nc
from .data import IGNORE_INDEX, MaskedBatch, mask_batch, pad_rows, plan_batches
from .errors import DataError, NumericFault, VocabMismatchError
from .subword import BOS_ID, EOS_ID, PAD_ID, SubwordVocab, encode
from .transformer import ContextStack, PositionMode, TransformerConfig, encoder_forward, init_encoder

logger = logging.getLogger(__name__)


def lm_config(**overrides) -> TransformerConfig:
    """Desk-scale LM defaults: learned positions, post-norm, GELU."""
    base = dict(num_layers=4, hidden_dim=64, ffn_dim=128, num_heads=4, dropout_p=0.1, max_positions=64,
                position_mode=PositionMode.LEARNED, prenorm=False, activation="gelu")
    base.update(overrides)
    return TransformerConfig(**base)


@dataclass
class PretrainConfig:
    steps: int = 2000
    peak_lr: float = 1e-3
    warmup: int = 200
    power: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # coupled L2 at 0.01 pins small desk runs to the unigram plateau; paper configs set it
    weight_decay: float = 0.0
    batch_tokens: int = 2048
    mask_prob: float = 0.15
    log_interval: int = 100
    tie_output: bool = True


@dataclass
class LMCheckpoint:
    config: TransformerConfig
    vocab: SubwordVocab
    params: nc.ParamStore
    meta: dict = field(default_factory=dict)

    @property
    def vocab_hash(self) -> str:
        return self.vocab.sha256()

    def stack(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None, train: bool = False,
              generator: torch.Generator | None = None) -> ContextStack:
        return lm_encode(self.params.tensors(), self.config, ids, pad_mask, train, generator)

    def save(self, path):
        meta = {
            "kind": "lm",
            "config": self.config.to_dict(),
            "vocab_hash": self.vocab_hash,
            "vocab": list(self.vocab.tokens),
            **{k: v for k, v in self.meta.items() if k not in ("history",)},
        }
        ckpt_io.save(path, meta, self.params.to_numpy())

    @classmethod
    def load(cls, path, expect_vocab: SubwordVocab | None = None) -> "LMCheckpoint":
        meta, arrays = ckpt_io.load(path, expect_vocab.sha256() if expect_vocab is not None else None)
        if meta.get("kind") != "lm":
            raise DataError(f"{path}: not a language-model checkpoint")
        vocab = SubwordVocab(tuple(meta.pop("vocab")))
        if vocab.sha256() != meta["vocab_hash"]:
            raise VocabMismatchError(f"{path}: embedded vocabulary does not match its hash")
        config = TransformerConfig.from_dict(meta.pop("config"))
        return cls(config, vocab, nc.ParamStore.from_arrays(arrays), meta)


def init_lm(vocab_size: int, config: TransformerConfig, seed: int, tie_output: bool = True) -> nc.ParamStore:
    gen = torch.Generator().manual_seed(seed)
    d = config.hidden_dim
    store = nc.ParamStore()
    store.add("tok_emb", torch.randn(vocab_size, d, generator=gen) * 0.02)
    store.add("pos_emb", torch.randn(config.max_positions, d, generator=gen) * 0.02)
    store.add("emb_ln.g", torch.ones(d))
    store.add("emb_ln.b", torch.zeros(d))
    init_encoder(store, "enc", config, gen)
    store.add("head.dense.w", torch.randn(d, d, generator=gen) * 0.02)
    store.add("head.dense.b", torch.zeros(d))
    store.add("head.ln.g", torch.ones(d))
    store.add("head.ln.b", torch.zeros(d))
    store.add("head.bias", torch.zeros(vocab_size))
    if not tie_output:
        store.add("head.out.w", torch.randn(d, vocab_size, generator=gen) * 0.02)
    return store


def _enc_params(params):
    return {k[4:]: v for k, v in params.items() if k.startswith("enc.")}


def lm_encode(params, config: TransformerConfig, ids: torch.Tensor, pad_mask: torch.Tensor | None = None,
              train: bool = False, generator: torch.Generator | None = None) -> ContextStack:
    if ids.shape[-1] > config.max_positions:
        raise DataError(f"sequence of {ids.shape[-1]} tokens exceeds LM max_positions {config.max_positions}")
    x = nc.embedding_lookup(params["tok_emb"], ids) + params["pos_emb"][: ids.shape[-1]]
    x = nc.layer_norm(x, params["emb_ln.g"], params["emb_ln.b"])
    x = nc.dropout(x, config.dropout_p, generator, train)
    if pad_mask is None:
        pad_mask = ids == PAD_ID
    return encoder_forward(x, pad_mask, config, _enc_params(params), train, generator)


def mlm_logits(params, hidden: torch.Tensor) -> torch.Tensor:
    h = nc.gelu(hidden @ params["head.dense.w"] + params["head.dense.b"])
    h = nc.layer_norm(h, params["head.ln.g"], params["head.ln.b"])
    out = params["head.out.w"] if "head.out.w" in params else params["tok_emb"].T
    return h @ out + params["head.bias"]


def masked_lm_objective(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Cross-entropy and argmax accuracy over positions with a label."""
    selected = labels != IGNORE_INDEX
    if not bool(selected.any()):
        raise DataError("batch has no masked positions")
    loss = nc.cross_entropy(logits, labels, IGNORE_INDEX)
    with torch.no_grad():
        acc = (logits[selected].argmax(-1) == labels[selected]).double().mean().item()
    return loss, acc


def mlm_loss(batch: MaskedBatch, params, config: TransformerConfig, train: bool = False,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, float]:
    if batch.num_masked == 0:
        raise DataError("batch has no masked positions")
    if isinstance(params, nc.ParamStore):
        params = params.tensors()
    ids = torch.as_tensor(batch.input_ids)
    pad = torch.as_tensor(batch.attention_mask) == 0
    top = lm_encode(params, config, ids, pad, train, generator).layers[-1]
    labels = torch.as_tensor(batch.labels)
    return masked_lm_objective(mlm_logits(params, top), labels)


def pack_segments(sentences: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """BOS s1 EOS s2 EOS ... segments no longer than ``max_len``; long sentences are truncated."""
    segments: list[list[int]] = []
    cur = [BOS_ID]
    truncated = 0
    for s in sentences:
        s = list(s)
        if len(s) + 2 > max_len:
            s = s[: max_len - 2]
            truncated += 1
        if len(cur) + len(s) + 1 > max_len:
            segments.append(cur)
            cur = [BOS_ID]
        cur.extend(s)
        cur.append(EOS_ID)
    if len(cur) > 1:
        segments.append(cur)
    if truncated:
        logger.warning("truncated %d sentence(s) longer than %d tokens", truncated, max_len - 2)
    return segments


def pretrain(mixed_corpus: Sequence[str], vocab: SubwordVocab, config: TransformerConfig,
             opt: PretrainConfig | None = None, seed: int = 0, log_file=None) -> LMCheckpoint:
    """Masked-LM training on the shuffled mixture of both languages."""
    opt = opt or PretrainConfig()
    lines = [line for line in mixed_corpus if line.strip()]
    if not lines:
        raise DataError("empty pretraining corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lines))
    segments = pack_segments([encode(vocab, lines[i]) for i in order], config.max_positions)
    plan = plan_batches([len(s) for s in segments], opt.batch_tokens)

    params = init_lm(vocab.size, config, seed, opt.tie_output)
    gen = torch.Generator().manual_seed(seed)
    trainable = params.trainable()
    history = []
    if log_file is not None:
        log_file.write("step\tlr\tloss\tmasked_acc\n")

    batch_order: list[int] = []
    loss_val = acc = float("nan")
    first_loss = None
    for step in range(1, opt.steps + 1):
        if not batch_order:
            batch_order = list(rng.permutation(len(plan)))
        idx = plan[batch_order.pop()]
        ids = pad_rows([segments[i] for i in idx])
        batch = mask_batch(ids, vocab, opt.mask_prob, rng_seed=[seed, step])
        if batch.num_masked == 0:
            continue
        lr = nc.polynomial_decay_lr(step, opt.peak_lr, opt.warmup, opt.steps + 1, opt.power)
        params.zero_grad()
        loss, acc = mlm_loss(batch, params, config, train=True, generator=gen)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NumericFault(f"non-finite MLM loss at step {step}")
        if first_loss is None:
            first_loss = loss_val
        nc.backward(loss)
        nc.adam_step(trainable, lr, opt.beta1, opt.beta2, opt.adam_eps, opt.weight_decay)
        if step % opt.log_interval == 0 or step == opt.steps:
            history.append((step, lr, loss_val, acc))
            logger.info("mlm step %d lr %.3g loss %.4f acc %.3f", step, lr, loss_val, acc)
            if log_file is not None:
                log_file.write(f"{step}\t{lr:.6g}\t{loss_val:.6f}\t{acc:.4f}\n")

    params.freeze()
    meta = {"steps": opt.steps, "seed": seed, "initial_loss": first_loss, "final_loss": loss_val,
            "final_acc": acc, "history": history, "pretrain": asdict(opt)}
    return LMCheckpoint(config, vocab, params, meta)


def masked_accuracy(lm: LMCheckpoint, lines: Sequence[str], mask_prob: float = 0.15, seed: int = 0,
                    batch_tokens: int = 4096) -> float:
    """Masked-token accuracy of ``lm`` over ``lines`` with dropout off."""
    segments = pack_segments([encode(lm.vocab, s) for s in lines if s.strip()], lm.config.max_positions)
    params = lm.params.tensors()
    hits = total = 0
    with torch.no_grad():
        for n, idx in enumerate(plan_batches([len(s) for s in segments], batch_tokens)):
            batch = mask_batch(pad_rows([segments[i] for i in idx]), lm.vocab, mask_prob, rng_seed=[seed, n])
            if batch.num_masked == 0:
                continue
            _, acc = mlm_loss(batch, params, lm.config)
            hits += acc * batch.num_masked
            total += batch.num_masked
    return hits / total if total else float("nan")
