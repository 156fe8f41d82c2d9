import numpy as np
import pytest
import torch

from bimt.bridge import EmbeddingProvider, Mode, sample_p, select_infer, select_train, selected_layer
from bimt.errors import ConfigError, DataError
from bimt.transformer import ContextStack


def _stack(m, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ContextStack([1.0 + torch.rand(3, 4, generator=g, dtype=torch.float64) for _ in range(m)])


def test_selected_layer_examples():
    # M=6, K=3: thirds of [0, 1] map to layers 6, 5, 4
    assert selected_layer(6, 3, 0.0) == 6
    assert selected_layer(6, 3, 0.2) == 6
    assert selected_layer(6, 3, 1 / 3) == 6
    assert selected_layer(6, 3, 0.34) == 5
    assert selected_layer(6, 3, 2 / 3) == 5
    assert selected_layer(6, 3, 0.9) == 4
    assert selected_layer(6, 3, 1.0) == 4
    assert all(selected_layer(4, 1, p) == 4 for p in (0.0, 0.5, 1.0))


def test_k_bounds():
    for k in (0, 5):
        with pytest.raises(ConfigError, match="M=4"):
            selected_layer(4, k, 0.5)
    with pytest.raises(ValueError):
        selected_layer(4, 2, 1.5)


def test_k1_is_top_layer():
    s = _stack(4)
    assert torch.equal(select_infer(s, 1), s.layer(4))
    assert torch.equal(select_train(s, 1, 0.77), s.layer(4))


def test_infer_is_mean_of_top_k():
    s = _stack(4)
    expected = (s.layer(4) + s.layer(3) + s.layer(2)) / 3
    torch.testing.assert_close(select_infer(s, 3), expected, rtol=1e-15, atol=0)


@pytest.mark.parametrize("k", [1, 2, 4, 6])
def test_monte_carlo_matches_inference(k):
    s = _stack(6, seed=k)
    rng = np.random.default_rng(k)
    draws = rng.uniform(0, 1, 100_000)
    counts = np.bincount([selected_layer(6, k, float(p)) for p in draws], minlength=7)
    chosen = counts[7 - k:]
    assert counts[: 7 - k].sum() == 0
    assert np.all(np.abs(chosen / draws.size - 1 / k) <= 0.02)
    mc = sum(counts[i] * s.layer(i) for i in range(1, 7)) / draws.size
    rel = ((mc - select_infer(s, k)).abs() / select_infer(s, k).abs()).max()
    assert rel <= 0.01


def test_sample_p_range():
    rng = np.random.default_rng(0)
    ps = [sample_p(rng) for _ in range(1000)]
    assert 0 <= min(ps) and max(ps) <= 1


def test_provider_freezes_and_caches(toy_lm):
    prov = EmbeddingProvider(toy_lm, k=2)
    assert toy_lm.params.trainable() == []
    a = prov.embed_stack("ta kala")
    assert prov.embed_stack("ta kala") is a
    fresh = EmbeddingProvider(toy_lm, k=2, cache=False)
    b = fresh.embed_stack("ta kala")
    for i in range(1, 5):
        assert torch.equal(a.layer(i), b.layer(i))
        assert not a.layer(i).requires_grad


def test_provider_modes(toy_lm):
    train = EmbeddingProvider(toy_lm, k=2)
    infer = EmbeddingProvider(toy_lm, k=2, mode=Mode.INFER)
    stack = train.embed_stack("ta kala")
    assert torch.equal(train.embed("ta kala", 0.3), stack.layer(4))
    assert torch.equal(train.embed("ta kala", 0.7), stack.layer(3))
    torch.testing.assert_close(infer.embed("ta kala"), (stack.layer(4) + stack.layer(3)) / 2)
    with pytest.raises(ValueError):
        train.embed("ta kala")
    assert train.embed("ta kala", 0.1).shape == (len(train.token_ids("ta kala")), 32)


def test_provider_rejects_bad_k_and_long_input(toy_lm):
    with pytest.raises(ConfigError, match="M=4"):
        EmbeddingProvider(toy_lm, k=5)
    prov = EmbeddingProvider(toy_lm, k=1)
    with pytest.raises(DataError, match="max_positions"):
        prov.token_ids(" ".join(["ta"] * 80))
