import math

import numpy as np
import pytest
import torch

from bimt.errors import ShapeError
from bimt.numcore import ParamStore, grad_check
from bimt.transformer import (ContextStack, PositionMode, TransformerConfig, causal_mask_additive, decoder_forward,
                              encoder_forward, init_decoder, init_encoder, multi_head_attention,
                              padding_mask_additive, positional_encoding, sinusoidal_table)


def _cfg(**kw):
    base = dict(num_layers=2, hidden_dim=8, ffn_dim=16, num_heads=2, dropout_p=0.0, max_positions=32,
                position_mode=PositionMode.SINUSOIDAL, prenorm=False, activation="relu")
    base.update(kw)
    return TransformerConfig(**base)


def _identity_attention(d):
    p = {}
    for n in "qkvo":
        p[f"w{n}"] = torch.eye(d, dtype=torch.float64)
        p[f"b{n}"] = torch.zeros(d, dtype=torch.float64)
    return p


def test_attention_hand_case():
    # one head, identity projections: weights = softmax(q.k / sqrt(2))
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    v = torch.tensor([[2.0, 0.0], [0.0, 4.0]], dtype=torch.float64)
    out, w = multi_head_attention(q, k, v, None, _identity_attention(2), 1, return_weights=True)
    a = math.exp(1 / math.sqrt(2))
    w0 = a / (a + 1)
    assert w[0, 0].tolist() == pytest.approx([w0, 1 - w0], abs=1e-12)
    assert out[0].tolist() == pytest.approx([2 * w0, 4 * (1 - w0)], abs=1e-12)


def test_attention_masked_keys_get_zero_weight():
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    pad = torch.tensor([[False, False, True]])
    _, w = multi_head_attention(x, x, x, padding_mask_additive(pad, torch.float64), _identity_attention(4), 2,
                                return_weights=True)
    assert (w[..., 2] == 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(1, 2, 3, dtype=torch.float64))


def test_attention_mask_shape_error():
    x = torch.randn(2, 3, 4)
    with pytest.raises(ShapeError, match="mask"):
        multi_head_attention(x, x, x, torch.zeros(2, 4, 4), _identity_attention(4), 2)


def test_attention_heads_must_divide():
    x = torch.randn(2, 3, 6)
    with pytest.raises(ShapeError):
        multi_head_attention(x, x, x, None, _identity_attention(6), 4)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(hidden_dim=10, num_heads=4)
    c = _cfg()
    assert TransformerConfig.from_dict(c.to_dict()) == c


def test_sinusoidal_table():
    t = sinusoidal_table(5, 6, torch.float64)
    assert t[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
    assert t[1, 0] == pytest.approx(math.sin(1.0))
    assert t[3, 3] == pytest.approx(math.cos(3 / 10000 ** (2 / 6)))
    with pytest.raises(ShapeError):
        positional_encoding(40, _cfg())


def test_context_stack():
    s = ContextStack([torch.zeros(3, 4), torch.ones(3, 4)])
    assert s.num_layers == 2 and s.layer(2).sum() == 12
    with pytest.raises((IndexError, ValueError)):
        s.layer(0)
    with pytest.raises(ShapeError):
        ContextStack([torch.zeros(3, 4), torch.zeros(2, 4)])


def _model(cfg, vocab=11, seed=0):
    store = ParamStore()
    g = torch.Generator().manual_seed(seed)
    init_encoder(store, "enc", cfg, g)
    init_decoder(store, "dec", cfg, vocab, g)
    # non-trivial layer norm parameters and biases so the reference check bites
    for name, p in store.items():
        if name.endswith((".g", ".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            p.tensor.data.add_(0.1 * torch.randn(p.shape, generator=g))
    return {k: v.detach().to(torch.float64) for k, v in store.tensors().items()}


def _np_ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _np_attn(q, kv, mask, p, heads):
    d = q.shape[-1]
    dh = d // heads
    Q, K, V = (x @ p[f"{pre}.w{n}"] + p[f"{pre}.b{n}"] for x, n, pre in
               ((q, "q", p["_"]), (kv, "k", p["_"]), (kv, "v", p["_"])))
    out = np.zeros_like(Q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh) + mask
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        out[:, sl] = s @ V[:, sl]
    return out @ p[f"{p['_']}.wo"] + p[f"{p['_']}.bo"]


def _np_decoder(y, mem, p, cfg):
    """Straight numpy reference for the decoder stack (single sentence)."""
    P = {k: v.numpy() for k, v in p.items()}
    L = y.shape[0]
    causal = np.triu(np.full((L, L), -np.inf), 1)
    nomask = np.zeros((L, mem.shape[0]))

    def sub(x, fn, ln):
        g, b = P[f"{ln}.g"], P[f"{ln}.b"]
        if cfg.prenorm:
            return x + fn(_np_ln(x, g, b))
        return _np_ln(x + fn(x), g, b)

    for i in range(cfg.num_layers):
        pre = f"dec.{i}"
        y = sub(y, lambda h: _np_attn(h, h, causal, {**P, "_": f"{pre}.self"}, cfg.num_heads), f"{pre}.ln1")
        y = sub(y, lambda h: _np_attn(h, mem, nomask, {**P, "_": f"{pre}.cross"}, cfg.num_heads), f"{pre}.ln2")
        y = sub(y, lambda h: np.maximum(h @ P[f"{pre}.ffn.w1"] + P[f"{pre}.ffn.b1"], 0) @ P[f"{pre}.ffn.w2"]
                + P[f"{pre}.ffn.b2"], f"{pre}.ln3")
    if cfg.prenorm:
        y = _np_ln(y, P["dec.final_ln.g"], P["dec.final_ln.b"])
    return y @ P["dec.out.w"]


def _dec_params(p):
    return {k[4:]: v for k, v in p.items() if k.startswith("dec.")}


@pytest.mark.parametrize("prenorm", [False, True])
def test_decoder_matches_numpy_reference(prenorm):
    cfg = _cfg(prenorm=prenorm)
    p = _model(cfg)
    g = torch.Generator().manual_seed(3)
    y = torch.randn(5, 8, generator=g, dtype=torch.float64)
    mem = torch.randn(4, 8, generator=g, dtype=torch.float64)
    got = decoder_forward(y.unsqueeze(0), mem.unsqueeze(0), causal_mask_additive(5, torch.float64), None, cfg,
                          _dec_params(p))[0]
    ref = _np_decoder(y.numpy(), mem.numpy(), p, cfg)
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-10)


@pytest.mark.parametrize("length", range(1, 9))
def test_decoder_is_causal(length):
    cfg = _cfg()
    p = _dec_params(_model(cfg))
    g = torch.Generator().manual_seed(length)
    mem = torch.randn(1, 3, 8, generator=g, dtype=torch.float64)
    y = torch.randn(1, length, 8, generator=g, dtype=torch.float64)
    mask = causal_mask_additive(length, torch.float64)
    base = decoder_forward(y, mem, mask, None, cfg, p)
    for j in range(length):
        changed = y.clone()
        changed[0, j] += torch.randn(8, generator=g, dtype=torch.float64)
        out = decoder_forward(changed, mem, mask, None, cfg, p)
        assert torch.equal(out[0, :j], base[0, :j])


@pytest.mark.parametrize("prenorm", [False, True])
def test_encoder_padding_invariance(prenorm):
    cfg = _cfg(prenorm=prenorm)
    p = {k[4:]: v for k, v in _model(cfg).items() if k.startswith("enc.")}
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    alone = encoder_forward(x, torch.zeros(1, 4, dtype=torch.bool), cfg, p)
    padded = torch.cat([x, torch.randn(1, 3, 8, dtype=torch.float64) * 5], 1)
    pad = torch.tensor([[False] * 4 + [True] * 3])
    with_pad = encoder_forward(padded, pad, cfg, p)
    for i in range(1, cfg.num_layers + 1):
        torch.testing.assert_close(with_pad.layer(i)[:, :4], alone.layer(i), atol=1e-12, rtol=0)


def test_encoder_returns_every_layer():
    cfg = _cfg(num_layers=3)
    p = {k[4:]: v for k, v in _model(cfg).items() if k.startswith("enc.")}
    stack = encoder_forward(torch.randn(5, 8, dtype=torch.float64), None, cfg, p)
    assert stack.num_layers == 3 and stack.layer(3).shape == (5, 8)
    with pytest.raises(ShapeError):
        encoder_forward(torch.randn(5, 6, dtype=torch.float64), None, cfg, p)


def test_encoder_layer_gradient():
    cfg = _cfg(num_layers=1, activation="gelu")
    p = {k[4:]: v for k, v in _model(cfg).items() if k.startswith("enc.")}
    w = torch.randn(3, 8, dtype=torch.float64)
    err = grad_check(lambda x: (encoder_forward(x, None, cfg, p).layer(1) * w).sum(),
                     torch.randn(3, 8, dtype=torch.float64))
    assert err <= 1e-4
