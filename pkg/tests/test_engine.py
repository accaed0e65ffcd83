import numpy as np
import pytest
from conftest import FAMILIES, tiny_config
from oracle import Reference

from neuronedit.engine import (
    EngineError,
    attn_neuron_contributions,
    char_normalized_entropy,
    ffn_coefficients,
    forward,
    greedy_decode,
    logits,
    sequence_nll,
)
from neuronedit.weights import random_model


@pytest.mark.parametrize("family", FAMILIES, ids=lambda f: ",".join(f"{k}={v}" for k, v in f.items()) or "default")
def test_matches_float64_reference(family):
    cfg = tiny_config(d_model=8, n_heads=2, d_head=4, d_ffn=12, **family)
    w = random_model(cfg, seed=3)
    tokens = [0, 5, 17, 3, 42, 8]
    ref = Reference(w.tensors, cfg.to_dict()).run(tokens)
    tr = forward(w, tokens)
    np.testing.assert_allclose(tr.logits, ref["logits"], atol=1e-4)
    np.testing.assert_allclose(tr.ffn_coef, np.array(ref["coef"]), atol=1e-4)
    np.testing.assert_allclose(tr.attn_pattern, np.array(ref["alpha"]), atol=1e-5)
    np.testing.assert_allclose(tr.values, np.array(ref["values"]), atol=1e-5)


@pytest.mark.parametrize("family", FAMILIES)
def test_residual_telescopes(family):
    w = random_model(tiny_config(**family), seed=0)
    tr = forward(w, [0, 1, 2, 3, 4, 5, 6])
    total = tr.embed + tr.attn_out.sum(axis=0) + tr.ffn_out.sum(axis=0)
    np.testing.assert_allclose(tr.resid_final, total, atol=1e-4)
    for l in range(w.config.n_layers):
        np.testing.assert_allclose(tr.resid_post(l), tr.resid_mid(l) + tr.ffn_out[l], atol=1e-5)


@pytest.mark.parametrize("family", FAMILIES)
def test_ffn_output_is_sum_of_subvalues(family):
    w = random_model(tiny_config(**family), seed=1)
    tr = forward(w, [0, 9, 8, 7])
    for l in range(w.config.n_layers):
        fc2 = w.layer(l, "ffn.fc2")
        bias = w.layer(l, "ffn.fc2_bias")
        recon = tr.ffn_coef[l] @ fc2.T + (0 if bias is None else bias)
        np.testing.assert_allclose(tr.ffn_out[l], recon, atol=1e-5)


def test_head_outputs_sum_to_attention_output():
    w = random_model(tiny_config(n_heads=4, d_head=4), seed=2)
    tr = forward(w, [0, 3, 1, 4, 1, 5])
    for l in range(2):
        for pos in range(tr.n_tokens):
            heads = sum(tr.head_output(l, j, pos) for j in range(4))
            np.testing.assert_allclose(heads, tr.attn_out[l, pos], atol=1e-5)


def test_attention_is_causal_and_normalized():
    w = random_model(tiny_config(), seed=5)
    tr = forward(w, list(range(8)))
    np.testing.assert_allclose(tr.attn_pattern.sum(-1), 1.0, atol=1e-6)
    assert np.all(np.triu(tr.attn_pattern[0, 0], k=1) == 0)


def test_positioned_contributions_sum_to_head_output():
    w = random_model(tiny_config(), seed=6)
    tr = forward(w, [0, 2, 4, 6])
    parts = attn_neuron_contributions(tr, 1, 0)
    assert len(parts) == w.config.d_head * tr.n_tokens
    np.testing.assert_allclose(sum(p.vector for p in parts), tr.head_output(1, 0), atol=1e-5)
    with pytest.raises(IndexError):
        attn_neuron_contributions(tr, 2, 0)


def test_prefix_logits_are_stable():
    w = random_model(tiny_config(position_family="rotary"), seed=4)
    full = logits(w, [0, 1, 2, 3, 4])
    part = logits(w, [0, 1, 2])
    np.testing.assert_allclose(full[:3], part, atol=1e-5)


def test_ablate_heads_removes_output():
    w = random_model(tiny_config(), seed=7)
    tr = forward(w, [0, 1, 2], ablate_heads=[(0, 1)])
    assert np.allclose(tr.head_output(0, 0), tr.attn_out[0, -1])


def test_bad_tokens_rejected():
    w = random_model(tiny_config(context_length=4), seed=0)
    with pytest.raises(EngineError):
        forward(w, [])
    with pytest.raises(EngineError):
        forward(w, [0, 50])
    with pytest.raises(EngineError):
        forward(w, [0, 1, 2, 3, 4])
    with pytest.raises(IndexError):
        ffn_coefficients(forward(w, [0, 1]), 5)


class _ByteTok:
    def encode(self, text):
        return [0] + [1 + b % 40 for b in text.encode()]


def test_char_normalized_entropy():
    w = random_model(tiny_config(), seed=8)
    tok = _ByteTok()
    ids = tok.encode("hello")
    lp = np.log(np.exp(logits(w, ids)[:-1].astype(np.float64)) / np.exp(logits(w, ids)[:-1].astype(np.float64)).sum(-1, keepdims=True))
    nll = -sum(lp[i, ids[i + 1]] for i in range(len(ids) - 1))
    assert sequence_nll(w, ids) == pytest.approx(nll, rel=1e-6)
    assert char_normalized_entropy(w, tok, "hello") == pytest.approx(nll / 5, rel=1e-6)
    with pytest.raises(EngineError):
        char_normalized_entropy(w, tok, "")


def test_greedy_decode_is_argmax():
    w = random_model(tiny_config(), seed=9)
    out = greedy_decode(w, [0, 4], 3)
    assert out[0] == int(np.argmax(logits(w, [0, 4])[-1]))
    assert out[1] == int(np.argmax(logits(w, [0, 4, out[0]])[-1]))
