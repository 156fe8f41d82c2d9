import pytest

from bimt.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from bimt.config import RunConfig, load_config, parse_overrides
from bimt.errors import ConfigError

TINY = """
lm_vocab_size = 80
dec_vocab_size = 80
lm_layers = 2
lm_dim = 16
lm_heads = 2
lm_ffn = 32
lm_steps = 20
lm_warmup = 4
lm_batch_tokens = 256
nmt_dim = 16
nmt_heads = 2
nmt_ffn = 32
enc_layers = 1
dec_layers = 1
k = 2
steps = 15
warmup = 5
batch_tokens = 256
ft_steps = 4
ft_warmup = 2
beam = 2
log_interval = 5
"""


def run_pipeline(root, seed=0):
    """synth-data -> pretrain -> train --dual -> finetune -> translate -> score."""
    conf = root / "tiny.conf"
    conf.write_text(TINY, encoding="utf-8")
    data = root / "data"
    c = ["--config", str(conf), "--seed", str(seed)]
    assert main(["synth-data", "--out", str(data), "--train", "60", "--dev", "8", "--seed", str(seed)]) == EXIT_OK
    assert main(["pretrain", *c, "--corpus", str(data / "mono.txt"), "--out", str(root / "lm")]) == EXIT_OK
    lm = str(root / "lm" / "lm.bmt")
    pair = ["--train-src", str(data / "train.src"), "--train-tgt", str(data / "train.tgt")]
    assert main(["train", *c, "--lm", lm, *pair, "--dual", "--out", str(root / "dual")]) == EXIT_OK
    assert main(["finetune", *c, "--lm", lm, *pair, "--parent", str(root / "dual" / "nmt.bmt"),
                 "--direction", "forward", "--out", str(root / "ft")]) == EXIT_OK
    assert main(["translate", *c, "--lm", lm, "--model", str(root / "ft" / "nmt.bmt"),
                 "--input", str(data / "dev.src"), "--out", str(root / "ft")]) == EXIT_OK
    assert main(["score", "--hyp", str(root / "ft" / "translations.txt"), "--ref", str(data / "dev.tgt"),
                 "--out", str(root / "ft")]) == EXIT_OK
    return root


ARTIFACTS = ["lm/lm.bmt", "lm/lm.vocab", "dual/nmt.bmt", "dual/dec.vocab", "dual/train.dual.tsv", "ft/nmt.bmt",
             "ft/translations.txt", "ft/bleu.txt", "ft/config.resolved.conf"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_artifacts(pipeline):
    for name in ARTIFACTS:
        assert (pipeline / name).stat().st_size > 0, name
    lines = (pipeline / "ft" / "translations.txt").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 8
    assert (pipeline / "ft" / "bleu.txt").read_text().startswith("BLEU = ")
    resolved = load_config(pipeline / "ft" / "config.resolved.conf")
    assert resolved.k == 2 and resolved.lm_dim == 16


def test_score_identity(tmp_path, capsys):
    ref = tmp_path / "ref.txt"
    ref.write_text("a b c d e\nf g h i j\n", encoding="utf-8")
    assert main(["score", "--hyp", str(ref), "--ref", str(ref)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("BLEU = 100.00")


def test_score_line_mismatch(tmp_path, capsys):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("x\ny\n", encoding="utf-8")
    b.write_text("x\n", encoding="utf-8")
    assert main(["score", "--hyp", str(a), "--ref", str(b)]) == EXIT_DATA
    assert "line count mismatch 2 vs 1" in capsys.readouterr().err


def test_missing_file_is_data_error(tmp_path):
    assert main(["score", "--hyp", str(tmp_path / "none"), "--ref", str(tmp_path / "none")]) == EXIT_DATA


def test_k_larger_than_m(pipeline, capsys):
    data = pipeline / "data"
    code = main(["train", "--config", str(pipeline / "tiny.conf"), "--lm", str(pipeline / "lm" / "lm.bmt"),
                 "--train-src", str(data / "train.src"), "--train-tgt", str(data / "train.tgt"), "--k", "3",
                 "--out", str(pipeline / "bad")])
    assert code == EXIT_USAGE
    assert "K=3 exceeds the LM layer count M=2" in capsys.readouterr().err


def test_unknown_config_key(pipeline, capsys):
    code = main(["pretrain", "--config", str(pipeline / "tiny.conf"), "--set", "bogus=1",
                 "--out", str(pipeline / "x")])
    assert code == EXIT_USAGE
    assert "bogus" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["translate"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE


def test_sweep_rejects_bad_sizes(pipeline, capsys):
    base = ["sweep-vocab", "--config", str(pipeline / "tiny.conf"), "--lm", str(pipeline / "lm" / "lm.bmt"),
            "--out", str(pipeline / "sweep")]
    assert main([*base, "--sizes", "80"]) == EXIT_USAGE
    assert main([*base, "--sizes", "80,80"]) == EXIT_USAGE
    assert "duplicate" in capsys.readouterr().err


def test_sweep_vocab(pipeline, capsys):
    data = pipeline / "data"
    code = main(["sweep-vocab", "--config", str(pipeline / "tiny.conf"), "--set", "steps=6", "--set", "beam=1",
                 "--lm", str(pipeline / "lm" / "lm.bmt"), "--train-src", str(data / "train.src"),
                 "--train-tgt", str(data / "train.tgt"), "--dev-src", str(data / "dev.src"),
                 "--dev-tgt", str(data / "dev.tgt"), "--sizes", "60,90", "--out", str(pipeline / "sweep")])
    assert code == EXIT_OK
    table = (pipeline / "sweep" / "sweep.tsv").read_text().splitlines()
    assert table[0] == "size\tdev_bleu" and [r.split("\t")[0] for r in table[1:]] == ["60", "90"]
    assert "best\t" in capsys.readouterr().out


def test_config_parsing(tmp_path):
    assert parse_overrides(["k = 3  # comment", "", "prenorm = false", "alpha=0.8"]) == \
        {"k": 3, "prenorm": False, "alpha": 0.8}
    with pytest.raises(ConfigError):
        parse_overrides(["k = three"])
    with pytest.raises(ConfigError):
        parse_overrides(["just words"])
    with pytest.raises(ConfigError):
        RunConfig(source_embedding="bert").validate()
    with pytest.raises(ConfigError):
        RunConfig(lm_warmup=5000, lm_steps=100).validate()
    cfg = RunConfig(k=5, prenorm=False)
    path = tmp_path / "c.conf"
    cfg.write(path)
    assert load_config(path) == cfg
