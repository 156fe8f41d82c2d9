import numpy as np
import pytest
import torch

from bimt.bridge import EmbeddingProvider
from bimt.mlm import PretrainConfig, lm_config, pretrain
from bimt.subword import train_vocab
from bimt.synth import make_task

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_pairs():
    train, dev = make_task(1000, 100, seed=0)
    return train, dev


@pytest.fixture(scope="session")
def toy_lm(toy_pairs):
    """A quickly pretrained, frozen 4-layer LM with d=32."""
    train, _ = toy_pairs
    mixed = [s for pair in train for s in pair]
    vocab = train_vocab(mixed, 200)
    config = lm_config(num_layers=4, hidden_dim=32, ffn_dim=64, num_heads=4, max_positions=64)
    opt = PretrainConfig(steps=300, peak_lr=2e-3, warmup=30, batch_tokens=1024, log_interval=100)
    return pretrain(mixed, vocab, config, opt, seed=0)


@pytest.fixture
def provider(toy_lm):
    return EmbeddingProvider(toy_lm, k=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
