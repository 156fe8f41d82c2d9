"""Command-line entry point: ``bimt <command> ...``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric fault.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import nmt
from .bleu import corpus_bleu
from .bridge import EmbeddingProvider
from .config import RunConfig, load_config
from .data import Direction, filter_direction, load_parallel, make_dual_directional, read_text_lines
from .errors import ConfigError, DataError, NumericFault
from .mlm import LMCheckpoint, PretrainConfig, lm_config, pretrain
from .subword import SubwordVocab, train_vocab

logger = logging.getLogger("bimt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# building blocks shared by commands


def lm_transformer_config(cfg: RunConfig):
    return lm_config(num_layers=cfg.lm_layers, hidden_dim=cfg.lm_dim, ffn_dim=cfg.lm_ffn, num_heads=cfg.lm_heads,
                     dropout_p=cfg.lm_dropout, max_positions=cfg.lm_max_positions)


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(steps=cfg.lm_steps, peak_lr=cfg.lm_peak_lr, warmup=cfg.lm_warmup, power=cfg.lm_power,
                          beta1=cfg.lm_beta1, beta2=cfg.lm_beta2, weight_decay=cfg.lm_weight_decay,
                          batch_tokens=cfg.lm_batch_tokens, mask_prob=cfg.mask_prob,
                          log_interval=cfg.log_interval)


def nmt_config(cfg: RunConfig) -> nmt.NMTConfig:
    return nmt.NMTConfig(enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, hidden_dim=cfg.nmt_dim,
                         ffn_dim=cfg.nmt_ffn, num_heads=cfg.nmt_heads, dropout_p=cfg.nmt_dropout,
                         max_positions=cfg.nmt_max_positions, prenorm=cfg.prenorm, tie_output=cfg.tie_output,
                         source_embedding=cfg.source_embedding, k=cfg.k, layer_selection=cfg.layer_selection,
                         per_batch_p=cfg.per_batch_p)


def train_regime(cfg: RunConfig, kind: nmt.RegimeKind, direction=None) -> nmt.TrainRegime:
    return nmt.TrainRegime(kind=kind, direction=direction, steps=cfg.steps, peak_lr=cfg.peak_lr, warmup=cfg.warmup,
                           init_lr=cfg.init_lr, label_smoothing=cfg.label_smoothing, seed=cfg.seed,
                           batch_tokens=cfg.batch_tokens, beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps,
                           weight_decay=cfg.weight_decay, log_interval=cfg.log_interval,
                           save_interval=cfg.save_interval)


def finetune_regime(cfg: RunConfig, direction: Direction) -> nmt.TrainRegime:
    r = train_regime(cfg, nmt.RegimeKind.FINETUNE, direction)
    r.steps, r.peak_lr, r.warmup = cfg.ft_steps, cfg.ft_peak_lr, cfg.ft_warmup
    r.continue_schedule = cfg.ft_continue_schedule
    return r


def load_provider(path, cfg: RunConfig) -> EmbeddingProvider:
    lm = LMCheckpoint.load(path)
    m = lm.config.num_layers
    if not 1 <= cfg.k <= m:
        raise ConfigError(f"K={cfg.k} exceeds the LM layer count M={m}")
    return EmbeddingProvider(lm, k=cfg.k)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(value, what):
    if not value:
        raise ConfigError(f"missing {what}")
    return value


def train_translation(cfg: RunConfig, provider: EmbeddingProvider, src, tgt, out: Path, dual: bool = False,
                      dev_src=None, dev_tgt=None, dec_vocab_size=None) -> nmt.NMTCheckpoint:
    corpus = load_parallel(src, tgt)
    if dual:
        corpus = make_dual_directional(corpus, cfg.seed)
        corpus.save_tsv(out / "train.dual.tsv")
        dec_text = corpus.targets
        kind = nmt.RegimeKind.DUAL
    else:
        dec_text = corpus.targets
        kind = nmt.RegimeKind.ONE_WAY
    dec_vocab = train_vocab(dec_text, dec_vocab_size or cfg.dec_vocab_size)
    dec_vocab.save(out / "dec.vocab")
    dev = load_parallel(dev_src, dev_tgt) if dev_src and dev_tgt else None
    regime = train_regime(cfg, kind, None if dual else Direction.FORWARD)
    with open(out / "train.log", "w", encoding="utf-8") as log:
        ckpt = nmt.train(corpus, provider, regime, nmt_config(cfg), dec_vocab, dev=dev, out_dir=out, log_file=log)
    ckpt.save(out / "nmt.bmt")
    return ckpt


def translate_lines(cfg: RunConfig, model: nmt.NMTModel, provider, lines):
    return nmt.translate(model, provider, lines, cfg.beam, cfg.alpha, cfg.length_penalty)


# commands


def cmd_synth_data(args, cfg):
    from .synth import write_task
    out = write_task(args.out, args.train, args.dev, args.seed)
    print(f"wrote synthetic task to {out}")


def cmd_train_tokenizer(args, cfg):
    lines = [line for path in args.input for line in read_text_lines(path)]
    vocab = train_vocab(lines, args.size or cfg.lm_vocab_size)
    vocab.save(args.out)
    print(f"vocab size {vocab.size} written to {args.out} (sha256 {vocab.sha256()[:12]})")


def cmd_pretrain(args, cfg):
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved.conf")
    corpus_paths = args.corpus or [_path(cfg.lm_corpus, "--corpus / lm_corpus")]
    lines = [line for path in corpus_paths for line in read_text_lines(path)]
    vocab = SubwordVocab.load(args.vocab) if args.vocab else train_vocab(lines, cfg.lm_vocab_size)
    vocab.save(out / "lm.vocab")
    with open(out / "lm_train.log", "w", encoding="utf-8") as log:
        lm = pretrain(lines, vocab, lm_transformer_config(cfg), pretrain_config(cfg), cfg.seed, log_file=log)
    lm.save(out / "lm.bmt")
    print(f"pretrained LM: final loss {lm.meta['final_loss']:.4f}, masked acc {lm.meta['final_acc']:.3f}")


def cmd_train(args, cfg):
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved.conf")
    provider = load_provider(args.lm, cfg)
    ckpt = train_translation(cfg, provider, _path(args.train_src or cfg.train_src, "--train-src"),
                             _path(args.train_tgt or cfg.train_tgt, "--train-tgt"), out, args.dual,
                             args.dev_src or cfg.dev_src, args.dev_tgt or cfg.dev_tgt)
    print(f"trained {ckpt.meta['regime']} model: final loss {ckpt.meta['final_loss']:.4f}")


def cmd_finetune(args, cfg):
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved.conf")
    provider = load_provider(args.lm, cfg)
    parent = nmt.NMTCheckpoint.load(args.parent, provider)
    corpus = load_parallel(_path(args.train_src or cfg.train_src, "--train-src"),
                           _path(args.train_tgt or cfg.train_tgt, "--train-tgt"))
    direction = Direction(args.direction)
    corpus = filter_direction(make_dual_directional(corpus, cfg.seed), direction)
    with open(out / "finetune.log", "w", encoding="utf-8") as log:
        ckpt = nmt.finetune(parent, corpus, finetune_regime(cfg, direction), provider, log_file=log)
    ckpt.save(out / "nmt.bmt")
    print(f"fine-tuned on {direction.value} data: final loss {ckpt.meta['final_loss']}")


def cmd_translate(args, cfg):
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved.conf")
    provider = load_provider(args.lm, cfg)
    model = nmt.NMTCheckpoint.load(args.model, provider).model
    results = translate_lines(cfg, model, provider, read_text_lines(args.input))
    with open(out / args.output, "w", encoding="utf-8") as fh:
        for text, score in results:
            fh.write(f"{text}\t{score:.6f}\n" if args.scores else text + "\n")
    print(f"translated {len(results)} line(s) into {out / args.output}")


def cmd_score(args, cfg):
    report = corpus_bleu(read_text_lines(args.hyp), read_text_lines(args.ref))
    print(report)
    if args.out:
        out = _out_dir(args.out)
        (out / "bleu.txt").write_text(str(report) + "\n", encoding="utf-8")


def cmd_sweep_vocab(args, cfg):
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if len(sizes) < 2:
        raise ConfigError("sweep-vocab needs at least two sizes")
    if len(set(sizes)) != len(sizes):
        raise ConfigError(f"duplicate sizes in {sizes}")
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved.conf")
    provider = load_provider(args.lm, cfg)
    src = _path(args.train_src or cfg.train_src, "--train-src")
    tgt = _path(args.train_tgt or cfg.train_tgt, "--train-tgt")
    dev = load_parallel(_path(args.dev_src or cfg.dev_src, "--dev-src"), _path(args.dev_tgt or cfg.dev_tgt, "--dev-tgt"))
    rows = []
    for size in sizes:
        try:
            sub = _out_dir(out / f"size_{size}")
            ckpt = train_translation(cfg, provider, src, tgt, sub, dec_vocab_size=size)
            hyps = [h for h, _ in translate_lines(cfg, ckpt.model, provider, dev.sources)]
            bleu = corpus_bleu(hyps, dev.targets).bleu
        except (DataError, ConfigError, NumericFault) as exc:
            raise type(exc)(f"sweep failed at decoder vocab size {size}: {exc}") from exc
        rows.append((size, bleu))
    best = max(rows, key=lambda r: r[1])[0]
    table = "size\tdev_bleu\n" + "".join(f"{s}\t{b:.2f}\n" for s, b in rows)
    (out / "sweep.tsv").write_text(table, encoding="utf-8")
    print(table + f"best\t{best}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bimt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        return sp

    sp = sub.add_parser("synth-data", help="write the synthetic toy translation task")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, default=2000)
    sp.add_argument("--dev", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_data, config_required=False)

    sp = common(sub.add_parser("train-tokenizer", help="train a subword vocabulary"))
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--size", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_tokenizer)

    sp = common(sub.add_parser("pretrain", help="pretrain the bilingual masked LM"))
    sp.add_argument("--corpus", nargs="+")
    sp.add_argument("--vocab")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    def nmt_data(sp):
        sp.add_argument("--lm", required=True, help="LM checkpoint (lm.bmt)")
        sp.add_argument("--train-src")
        sp.add_argument("--train-tgt")
        sp.add_argument("--k", type=int, help="top-K LM layers for stochastic layer selection")
        sp.add_argument("--out", required=True)
        return sp

    sp = nmt_data(common(sub.add_parser("train", help="train a translation model")))
    sp.add_argument("--dev-src")
    sp.add_argument("--dev-tgt")
    sp.add_argument("--dual", action="store_true", help="dual-directional training on original + swapped pairs")
    sp.set_defaults(func=cmd_train)

    sp = nmt_data(common(sub.add_parser("finetune", help="one-stage fine-tuning on a single direction")))
    sp.add_argument("--parent", required=True)
    sp.add_argument("--direction", choices=[d.value for d in Direction], default="forward")
    sp.set_defaults(func=cmd_finetune)

    sp = common(sub.add_parser("translate", help="beam-search translation of a text file"))
    sp.add_argument("--lm", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--output", default="translations.txt")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--k", type=int)
    sp.add_argument("--scores", action="store_true", help="append the adjusted score as a second column")
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("score", help="tokenized corpus BLEU")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_score, config_required=False)

    sp = nmt_data(common(sub.add_parser("sweep-vocab", help="decoder vocabulary size sweep")))
    sp.add_argument("--sizes", required=True, help="comma-separated decoder vocab sizes")
    sp.add_argument("--dev-src")
    sp.add_argument("--dev-tgt")
    sp.set_defaults(func=cmd_sweep_vocab)
    return p


def resolve_config(args) -> RunConfig | None:
    if getattr(args, "config_required", True) is False:
        return None
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("k", "k"), ("beam", "beam"), ("alpha", "alpha")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"bimt: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"bimt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as exc:
        print(f"bimt: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
