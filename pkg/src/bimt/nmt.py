"""Encoder-decoder translation on top of frozen LM embeddings."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn.utils.rnn import pad_sequence

from . import checkpoint as ckpt_io
from . import numcore as nc
from .bridge import EmbeddingProvider, sample_p, select_infer, select_train, selected_layer
from .data import IGNORE_INDEX, Direction, ParallelCorpus, plan_batches
from .errors import ConfigError, DataError, NumericFault, VocabMismatchError
from .subword import BOS_ID, EOS_ID, PAD_ID, SubwordVocab, decode, encode
from .transformer import (PositionMode, TransformerConfig, causal_mask_additive, decoder_forward,
                          encoder_forward, init_decoder, init_encoder, padding_mask_additive,
                          sinusoidal_table)

logger = logging.getLogger(__name__)


class SourceEmbedding(str, enum.Enum):
    LM = "lm"          # frozen LM layer outputs
    RANDOM = "random"  # trainable table over LM token ids, randomly initialised


@dataclass(frozen=True)
class NMTConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    dropout_p: float = 0.1
    max_positions: int = 128
    prenorm: bool = True
    tie_output: bool = False
    source_embedding: SourceEmbedding = SourceEmbedding.LM
    k: int = 1
    layer_selection: bool = True
    per_batch_p: bool = True

    def __post_init__(self):
        object.__setattr__(self, "source_embedding", SourceEmbedding(self.source_embedding))

    def encoder(self) -> TransformerConfig:
        return TransformerConfig(self.enc_layers, self.hidden_dim, self.ffn_dim, self.num_heads, self.dropout_p,
                                 self.max_positions, PositionMode.SINUSOIDAL, self.prenorm, "relu")

    def decoder(self) -> TransformerConfig:
        return replace(self.encoder(), num_layers=self.dec_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_embedding"] = self.source_embedding.value
        return d


class RegimeKind(str, enum.Enum):
    ONE_WAY = "one_way"
    DUAL = "dual"
    FINETUNE = "finetune"


@dataclass
class TrainRegime:
    kind: RegimeKind = RegimeKind.ONE_WAY
    direction: Direction | None = None
    steps: int = 2000
    peak_lr: float = 1e-3
    warmup: int = 400
    init_lr: float = 0.0
    label_smoothing: float = 0.1
    seed: int = 0
    batch_tokens: int = 1024
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    log_interval: int = 100
    save_interval: int = 0
    continue_schedule: bool = False

    def __post_init__(self):
        self.kind = RegimeKind(self.kind)
        if self.direction is not None:
            self.direction = Direction(self.direction)


class NMTModel:
    def __init__(self, config: NMTConfig, decoder_vocab: SubwordVocab, params: nc.ParamStore,
                 source_vocab_size: int, lm_vocab_hash: str):
        self.config = config
        self.decoder_vocab = decoder_vocab
        self.params = params
        self.source_vocab_size = source_vocab_size
        self.lm_vocab_hash = lm_vocab_hash
        self.enc_config = config.encoder()
        self.dec_config = config.decoder()
        self.scale = math.sqrt(config.hidden_dim)

    @classmethod
    def build(cls, config: NMTConfig, provider: EmbeddingProvider, decoder_vocab: SubwordVocab,
              seed: int = 0) -> "NMTModel":
        if config.hidden_dim != provider.hidden_dim:
            raise ConfigError(f"NMT hidden_dim {config.hidden_dim} != LM hidden_dim {provider.hidden_dim}")
        if not 1 <= config.k <= provider.num_layers:
            raise ConfigError(f"K={config.k} exceeds the LM layer count M={provider.num_layers}")
        gen = torch.Generator().manual_seed(seed)
        d = config.hidden_dim
        store = nc.ParamStore()
        if config.source_embedding is SourceEmbedding.RANDOM:
            store.add("src_emb", torch.randn(provider.vocab.size, d, generator=gen) * d ** -0.5)
        init_encoder(store, "enc", config.encoder(), gen)
        store.add("dec_emb", torch.randn(decoder_vocab.size, d, generator=gen) * d ** -0.5)
        init_decoder(store, "dec", config.decoder(), decoder_vocab.size, gen, config.tie_output)
        return cls(config, decoder_vocab, store, provider.vocab.size, provider.vocab_hash)

    def check_provider(self, provider: EmbeddingProvider):
        if provider.vocab_hash != self.lm_vocab_hash:
            raise VocabMismatchError("LM vocabulary does not match the one this model was trained with")
        if provider.hidden_dim != self.config.hidden_dim:
            raise ConfigError(f"LM hidden_dim {provider.hidden_dim} != NMT hidden_dim {self.config.hidden_dim}")
        if self.config.k > provider.num_layers:
            raise ConfigError(f"K={self.config.k} exceeds the LM layer count M={provider.num_layers}")

    # forward pieces

    def _positions(self, length: int, dtype) -> torch.Tensor:
        if length > self.config.max_positions:
            raise DataError(f"length {length} exceeds NMT max_positions {self.config.max_positions}")
        return sinusoidal_table(length, self.config.hidden_dim, dtype)

    def source_inputs(self, provider: EmbeddingProvider, texts: Sequence[str], p=None,
                      infer: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded encoder inputs ``[B, L, d]`` (before scaling) and the padding mask."""
        if self.config.source_embedding is SourceEmbedding.RANDOM:
            rows = [torch.tensor(provider.token_ids(t)) for t in texts]
            ids = pad_sequence(rows, batch_first=True, padding_value=PAD_ID)
            lengths = torch.tensor([len(r) for r in rows])
            x = nc.embedding_lookup(self.params["src_emb"].tensor, ids)
        else:
            stacks = [provider.embed_stack(t) for t in texts]
            k = self.config.k
            if infer:
                layers = [select_infer(s, k) for s in stacks]
            elif not self.config.layer_selection:
                layers = [s.layers[-1] for s in stacks]
            else:
                ps = p if isinstance(p, (list, tuple)) else [p] * len(stacks)
                layers = [select_train(s, k, q) for s, q in zip(stacks, ps)]
            x = pad_sequence(layers, batch_first=True)
            lengths = torch.tensor([h.shape[0] for h in layers])
        pad = torch.arange(x.shape[1]).unsqueeze(0) >= lengths.unsqueeze(1)
        return x, pad

    def encode(self, x: torch.Tensor, pad: torch.Tensor, train: bool = False, generator=None) -> torch.Tensor:
        x = x * self.scale + self._positions(x.shape[1], x.dtype)
        x = nc.dropout(x, self.config.dropout_p, generator, train)
        enc = {k[4:]: v for k, v in self.params.tensors().items() if k.startswith("enc.")}
        return encoder_forward(x, pad, self.enc_config, enc, train, generator).layers[-1]

    def decode(self, tgt_in: torch.Tensor, enc_out: torch.Tensor, src_pad: torch.Tensor, train: bool = False,
               generator=None) -> torch.Tensor:
        t = self.params.tensors()
        T = tgt_in.shape[1]
        y = nc.embedding_lookup(t["dec_emb"], tgt_in) * self.scale + self._positions(T, enc_out.dtype)
        y = nc.dropout(y, self.config.dropout_p, generator, train)
        self_mask = causal_mask_additive(T, y.dtype) + padding_mask_additive(tgt_in == PAD_ID, y.dtype)
        cross_mask = padding_mask_additive(src_pad, y.dtype)
        dec = {k[4:]: v for k, v in t.items() if k.startswith("dec.")}
        out_w = t["dec_emb"].T if self.config.tie_output else None
        return decoder_forward(y, enc_out, self_mask, cross_mask, self.dec_config, dec, out_w, train, generator)

    def encode_targets(self, texts: Sequence[str]) -> list[list[int]]:
        return [encode(self.decoder_vocab, t) for t in texts]

    def detokenize(self, ids: Sequence[int]) -> str:
        return decode(self.decoder_vocab, ids)


def _teacher_forcing(target_rows: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    if not target_rows:
        raise DataError("empty target batch")
    tgt_in = pad_sequence([torch.tensor([BOS_ID] + list(r)) for r in target_rows], batch_first=True,
                          padding_value=PAD_ID)
    labels = pad_sequence([torch.tensor(list(r) + [EOS_ID]) for r in target_rows], batch_first=True,
                          padding_value=IGNORE_INDEX)
    return tgt_in, labels


def nmt_loss(source_texts: Sequence[str], target_rows: Sequence[Sequence[int]], model: NMTModel,
             provider: EmbeddingProvider, p=None, label_smoothing: float = 0.0, train: bool = False,
             generator=None) -> torch.Tensor:
    """Teacher-forced, label-smoothed cross-entropy averaged over non-pad target positions."""
    if not source_texts or len(source_texts) != len(target_rows):
        raise DataError("nmt_loss needs a nonempty batch with one target row per source")
    tgt_in, labels = _teacher_forcing(target_rows)
    x, pad = model.source_inputs(provider, source_texts, p, infer=p is None and model.config.layer_selection)
    logits = model.decode(tgt_in, model.encode(x, pad, train, generator), pad, train, generator)
    return nc.cross_entropy(logits, labels, IGNORE_INDEX, label_smoothing)


@dataclass
class NMTCheckpoint:
    model: NMTModel
    meta: dict = field(default_factory=dict)

    def save(self, path):
        m = self.model
        meta = {
            "kind": "nmt",
            "config": m.config.to_dict(),
            "vocab_hash": m.lm_vocab_hash,
            "source_vocab_size": m.source_vocab_size,
            "decoder_vocab": list(m.decoder_vocab.tokens),
            "decoder_vocab_hash": m.decoder_vocab.sha256(),
            **{k: v for k, v in self.meta.items() if k != "history"},
        }
        ckpt_io.save(path, meta, m.params.to_numpy())

    @classmethod
    def load(cls, path, provider: EmbeddingProvider | None = None) -> "NMTCheckpoint":
        meta, arrays = ckpt_io.load(path, provider.vocab_hash if provider is not None else None)
        if meta.get("kind") != "nmt":
            raise DataError(f"{path}: not a translation-model checkpoint")
        dec_vocab = SubwordVocab(tuple(meta.pop("decoder_vocab")))
        if dec_vocab.sha256() != meta.pop("decoder_vocab_hash"):
            raise VocabMismatchError(f"{path}: decoder vocabulary does not match its hash")
        config = NMTConfig(**meta.pop("config"))
        model = NMTModel(config, dec_vocab, nc.ParamStore.from_arrays(arrays), meta.pop("source_vocab_size"),
                         meta.pop("vocab_hash"))
        if provider is not None:
            model.check_provider(provider)
        return cls(model, meta)


def _check_regime(corpus: ParallelCorpus, regime: TrainRegime, parent):
    dirs = corpus.directions()
    if not len(corpus):
        raise DataError("empty training corpus")
    if regime.kind is RegimeKind.DUAL and dirs != {Direction.FORWARD, Direction.SWAPPED}:
        raise DataError("dual-directional training needs a corpus mixing forward and swapped pairs")
    if regime.kind in (RegimeKind.ONE_WAY, RegimeKind.FINETUNE) and len(dirs) != 1:
        raise DataError(f"{regime.kind.value} training needs a single-direction corpus, got "
                        f"{sorted(d.value for d in dirs)}")
    if regime.direction is not None and dirs != {regime.direction}:
        raise DataError(f"corpus direction {sorted(d.value for d in dirs)} != regime direction "
                        f"{regime.direction.value}")
    if regime.kind is RegimeKind.FINETUNE and parent is None:
        raise ConfigError("fine-tuning needs a parent checkpoint")


def train(corpus: ParallelCorpus, provider: EmbeddingProvider, regime: TrainRegime, config: NMTConfig | None = None,
          decoder_vocab: SubwordVocab | None = None, parent: NMTCheckpoint | None = None,
          dev: ParallelCorpus | None = None, out_dir=None, log_file=None) -> NMTCheckpoint:
    """Train (or continue training ``parent``) for ``regime.steps`` updates."""
    _check_regime(corpus, regime, parent)
    seed = regime.seed
    if parent is not None:
        parent.model.check_provider(provider)
        model = NMTModel(parent.model.config, parent.model.decoder_vocab, parent.model.params.copy(),
                         parent.model.source_vocab_size, parent.model.lm_vocab_hash)
        step0 = parent.meta.get("total_steps", parent.meta.get("steps", 0)) if regime.continue_schedule else 0
    else:
        if config is None or decoder_vocab is None:
            raise ConfigError("training from scratch needs an NMTConfig and a decoder vocabulary")
        model = NMTModel.build(config, provider, decoder_vocab, seed)
        model.check_provider(provider)
        step0 = 0
    cfg = model.config
    trainable = model.params.trainable()

    sources = corpus.sources
    targets = model.encode_targets(corpus.targets)
    src_len = [len(provider.token_ids(s)) for s in sources]
    plan = plan_batches([max(a, len(b) + 1) for a, b in zip(src_len, targets)], regime.batch_tokens)

    order_rng = np.random.default_rng([seed, 0])
    p_rng = np.random.default_rng([seed, 1])
    gen = torch.Generator().manual_seed(seed)
    history: list[float] = []
    layer_counts = [0] * provider.num_layers
    pairs_seen = 0
    dev_losses = []
    if log_file is not None:
        log_file.write("step\tlr\tloss\n")

    batch_order: list[int] = []
    for step in range(1, regime.steps + 1):
        if not batch_order:
            batch_order = [int(i) for i in order_rng.permutation(len(plan))][::-1]
        idx = plan[batch_order.pop()]
        p = None
        if cfg.source_embedding is SourceEmbedding.LM and cfg.layer_selection:
            if cfg.per_batch_p:
                p = sample_p(p_rng)
                layer_counts[selected_layer(provider.num_layers, cfg.k, p) - 1] += len(idx)
            else:
                p = [sample_p(p_rng) for _ in idx]
                for q in p:
                    layer_counts[selected_layer(provider.num_layers, cfg.k, q) - 1] += 1
        lr = nc.inverse_sqrt_lr(step0 + step, regime.peak_lr, regime.warmup, regime.init_lr)
        model.params.zero_grad()
        loss = nmt_loss([sources[i] for i in idx], [targets[i] for i in idx], model, provider, p,
                        regime.label_smoothing, train=True, generator=gen)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault(f"non-finite NMT loss at step {step}")
        nc.backward(loss)
        nc.adam_step(trainable, lr, regime.beta1, regime.beta2, regime.adam_eps, regime.weight_decay)
        history.append(value)
        pairs_seen += len(idx)
        if regime.log_interval and (step % regime.log_interval == 0 or step == regime.steps):
            msg = f"{step}\t{lr:.6g}\t{value:.6f}"
            if dev is not None:
                dl = evaluate_loss(model, provider, dev, regime.batch_tokens)
                dev_losses.append((step, dl))
                msg += f"\tdev_loss={dl:.6f}"
            logger.info("nmt step %s", msg.replace("\t", " "))
            if log_file is not None:
                log_file.write(msg + "\n")
        if out_dir is not None and regime.save_interval and step % regime.save_interval == 0:
            NMTCheckpoint(model, {"steps": step}).save(Path(out_dir) / f"nmt_step{step}.bmt")

    stages = parent.meta.get("finetune_stages", 0) if parent is not None else 0
    if regime.kind is RegimeKind.FINETUNE:
        stages += 1
    meta = {
        "regime": regime.kind.value,
        "direction": regime.direction.value if regime.direction else None,
        "steps": regime.steps,
        "total_steps": (parent.meta.get("total_steps", 0) if parent is not None else 0) + regime.steps,
        "seed": seed,
        "final_loss": history[-1] if history else None,
        "finetune_stages": stages,
        "history": history,
        "layer_counts": layer_counts,
        "pairs_seen": pairs_seen,
        "dev_losses": dev_losses,
    }
    return NMTCheckpoint(model, meta)


def finetune(parent: NMTCheckpoint, corpus: ParallelCorpus, regime: TrainRegime,
             provider: EmbeddingProvider, **kwargs) -> NMTCheckpoint:
    """One further training stage on single-direction data, starting from ``parent``."""
    if len(corpus.directions()) != 1:
        raise DataError("fine-tuning corpus must hold a single direction (use filter_direction)")
    if parent.meta.get("finetune_stages", 0) >= 1:
        logger.warning("parent was already fine-tuned %d time(s); the usual recipe uses one stage",
                       parent.meta["finetune_stages"])
    regime = replace(regime, kind=RegimeKind.FINETUNE)
    return train(corpus, provider, regime, parent=parent, **kwargs)


def evaluate_loss(model: NMTModel, provider: EmbeddingProvider, corpus: ParallelCorpus,
                  batch_tokens: int = 2048) -> float:
    """Token-weighted mean cross-entropy (no smoothing, inference-mode bridge)."""
    targets = model.encode_targets(corpus.targets)
    sources = corpus.sources
    lengths = [max(len(provider.token_ids(s)), len(t) + 1) for s, t in zip(sources, targets)]
    total = count = 0.0
    with torch.no_grad():
        for idx in plan_batches(lengths, batch_tokens):
            n = sum(len(targets[i]) + 1 for i in idx)
            tgt_in, labels = _teacher_forcing([targets[i] for i in idx])
            x, pad = model.source_inputs(provider, [sources[i] for i in idx], infer=True)
            logits = model.decode(tgt_in, model.encode(x, pad), pad)
            total += nc.cross_entropy(logits, labels, IGNORE_INDEX).item() * n
            count += n
    return total / count


# decoding


@dataclass
class Hypothesis:
    ids: list[int]
    score: float
    log_prob: float
    finished: bool


def length_penalty(length: int, alpha: float, kind: str = "simple") -> float:
    if kind == "simple":
        return length ** alpha
    if kind == "gnmt":
        return ((5.0 + length) / 6.0) ** alpha
    raise ConfigError(f"unknown length penalty {kind!r}")


def default_max_len(model: NMTModel, source_len: int) -> int:
    return min(2 * source_len + 10, model.config.max_positions - 1)


def greedy_decode(model: NMTModel, provider: EmbeddingProvider, sources: Sequence[str],
                  max_len: int | None = None, batch_size: int = 64) -> list[list[int]]:
    out: list[list[int]] = []
    with torch.no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = list(sources[start:start + batch_size])
            x, pad = model.source_inputs(provider, chunk, infer=True)
            enc = model.encode(x, pad)
            src_lens = (~pad).sum(1).tolist()
            limits = [max_len or default_max_len(model, n) for n in src_lens]
            B = len(chunk)
            seq = torch.full((B, 1), BOS_ID, dtype=torch.long)
            done = torch.zeros(B, dtype=torch.bool)
            for t in range(max(limits)):
                logits = model.decode(seq, enc, pad)[:, -1]
                nxt = logits.argmax(-1)
                nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
                seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
                done |= nxt == EOS_ID
                done |= torch.tensor([t + 1 >= lim for lim in limits])
                if bool(done.all()):
                    break
            for row in seq[:, 1:].tolist():
                ids = []
                for tok in row:
                    if tok in (EOS_ID, PAD_ID):
                        break
                    ids.append(tok)
                out.append(ids)
    return out


def beam_search(model: NMTModel, provider: EmbeddingProvider, source_text: str, beam_width: int = 4,
                alpha: float = 0.6, max_len: int | None = None, penalty: str = "simple",
                return_all: bool = False):
    """Beam search from BOS, ranking finished hypotheses by log-prob / penalty(len).

    ``len`` counts generated tokens including EOS. Returns the best
    ``Hypothesis`` (or every finished one, best first, with ``return_all``).
    """
    if beam_width < 1:
        raise ConfigError("beam_width must be >= 1")
    if max_len is not None and max_len < 1:
        raise ConfigError("max_len must be >= 1")
    with torch.no_grad():
        x, pad = model.source_inputs(provider, [source_text], infer=True)
        enc = model.encode(x, pad)
        limit = max_len or default_max_len(model, int((~pad).sum()))
        beams: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
        finished: list[Hypothesis] = []
        V = model.decoder_vocab.size
        for t in range(limit):
            b = len(beams)
            seq = torch.tensor([s for s, _ in beams])
            logp = torch.log_softmax(model.decode(seq, enc.expand(b, -1, -1), pad.expand(b, -1))[:, -1], -1)
            cand = (torch.tensor([sc for _, sc in beams], dtype=logp.dtype).unsqueeze(1) + logp).view(-1)
            top_v, top_i = cand.topk(min(2 * beam_width, cand.numel()))
            live: list[tuple[list[int], float]] = []
            for rank, (v, i) in enumerate(zip(top_v.tolist(), top_i.tolist())):
                src, tok = divmod(i, V)
                ids = beams[src][0] + [tok]
                if tok == EOS_ID:
                    if rank < beam_width:
                        n = len(ids) - 1
                        finished.append(Hypothesis(ids[1:-1], v / length_penalty(n, alpha, penalty), v, True))
                elif len(live) < beam_width:
                    live.append((ids, v))
            if len(finished) >= beam_width or not live:
                break
            beams = live
        if not finished:
            finished = [Hypothesis(s[1:], v / length_penalty(len(s) - 1, alpha, penalty), v, False)
                        for s, v in beams]
        finished.sort(key=lambda h: -h.score)
    return finished if return_all else finished[0]


def translate(model: NMTModel, provider: EmbeddingProvider, sources: Sequence[str], beam_width: int = 4,
              alpha: float = 0.6, penalty: str = "simple") -> list[tuple[str, float]]:
    out = []
    for s in sources:
        h = beam_search(model, provider, s, beam_width, alpha, penalty=penalty)
        out.append((model.detokenize(h.ids), h.score))
    return out
