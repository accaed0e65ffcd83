import numpy as np
import pytest
from conftest import tiny_config
from oracle import Reference

from neuronedit.attribution import (
    Aggregate,
    Case,
    aggregate_head_logit_scores,
    aggregate_importance,
    aggregate_query_neurons,
    attn_importances,
    attn_value_importance,
    cases_from_pairs,
    dominant_position,
    dominant_positions,
    ffn_importances,
    ffn_value_importance,
    head_causal_score,
    head_logit_score,
    head_logit_scores,
    neuron_frequency,
    pooled,
    pooled_id,
    query_neuron_scores,
    query_scores,
    rank,
    score_cases,
    top_value_neurons,
)
from neuronedit.config import NeuronId, all_neurons
from neuronedit.datasets import DatasetError, PairedCase
from neuronedit.editing import mask_head
from neuronedit.engine import forward, log_softmax
from neuronedit.synthetic import DESK_GENDERS, planted_value_model, symmetric_model
from neuronedit.weights import get_neuron, random_model

TOKENS = [0, 5, 9, 33, 2, 17, 40, 11]


@pytest.fixture(scope="module")
def model32():
    cfg = tiny_config(d_model=32, n_heads=4, d_head=8, d_ffn=64, vocab_size=64)
    return random_model(cfg, seed=21)


def test_importances_match_reference_float64(model32):
    ref = Reference(model32.tensors, model32.config.to_dict()).importances(TOKENS, 7)
    tr = forward(model32, TOKENS, dtype=np.float64)
    f, a = ffn_importances(tr, 7), attn_importances(tr, 7)
    for (kind, l, j, k), v in ref.items():
        got = f[l, k] if kind == "ffn" else a[l, j, k]
        assert got == pytest.approx(v, abs=1e-6)


def test_importances_match_reference_fp32(model32):
    ref = Reference(model32.tensors, model32.config.to_dict()).importances(TOKENS, 7)
    tr = forward(model32, TOKENS)
    f = ffn_importances(tr, 7)
    assert max(abs(f[l, k] - ref[("ffn", l, None, k)]) for l in range(2) for k in range(64)) < 1e-5


def test_single_neuron_functions_agree(model32):
    tr = forward(model32, TOKENS)
    f, a = ffn_importances(tr, 3), attn_importances(tr, 3)
    assert ffn_value_importance(tr, NeuronId.ffn(1, 10), 3) == pytest.approx(f[1, 10], abs=1e-9)
    assert attn_value_importance(tr, NeuronId.attn(0, 2, 5), 3) == pytest.approx(a[0, 2, 5], abs=1e-9)
    with pytest.raises(ValueError):
        ffn_value_importance(tr, NeuronId.attn(0, 0, 0), 3)
    with pytest.raises(IndexError):
        ffn_value_importance(tr, NeuronId.ffn(0, 0), 64)
    with pytest.raises(IndexError):
        attn_value_importance(tr, NeuronId.attn(0, 4, 0), 3)


def test_zero_coefficient_means_zero_importance(model32):
    fc1 = model32["layers.1.ffn.fc1"].copy()
    fc1[4] = 0.0
    w = model32.replace(**{"layers.1.ffn.fc1": fc1})
    tr = forward(w, TOKENS)
    assert np.all(tr.ffn_coef[1, :, 4] == 0.0)
    assert ffn_importances(tr, 3)[1, 4] == pytest.approx(0.0, abs=1e-6)
    assert ffn_importances(forward(w, TOKENS, dtype=np.float64), 3)[1, 4] == pytest.approx(0.0, abs=1e-12)


def test_dominant_positions(model32):
    tr = forward(model32, TOKENS)
    ffn_pos, attn_pos = dominant_positions(tr)
    l, k = 1, 7
    assert ffn_pos[l, k] == np.argmax(np.abs(tr.ffn_coef[l, :, k]))
    nid = NeuronId.attn(0, 3, 2)
    alpha = tr.attn_pattern[0, 3, -1]
    expect = np.argmax(alpha * np.abs(tr.values[0, :, 3, 2]))
    assert attn_pos[0, 3, 2] == expect == dominant_position(tr, nid)
    assert dominant_position(tr, NeuronId.ffn(l, k)) == ffn_pos[l, k]


def test_ranking_ties_follow_canonical_order():
    assert list(rank(np.array([1.0, 3.0, 3.0, 2.0, 3.0]))) == [1, 2, 4, 3, 0]
    cfg = tiny_config()
    ids = [pooled_id(cfg, i) for i in range(cfg.n_layers * (cfg.d_ffn + cfg.d_model))]
    assert ids == all_neurons(cfg)
    flat = pooled(cfg, np.zeros((2, 32)), np.ones((2, 2, 8)))
    assert flat.shape == (2 * (32 + 16),) and flat[:32].sum() == 0 and flat[32:48].sum() == 16


def test_top_value_neurons_sorted_with_projections(model32):
    tr = forward(model32, TOKENS)
    res = top_value_neurons(tr, 7, n=5)
    scores = [r.importance for r in res.ffn]
    assert scores == sorted(scores, reverse=True) and len(res.attn) == 5
    assert scores[0] == pytest.approx(ffn_importances(tr, 7).max())
    top = res.ffn[0]
    assert len(top.projection.top_tokens) == 10
    d = top.to_dict()
    assert d["id"] == str(top.id) and d["role"] == "ffn-value" and "top_tokens" in d
    with pytest.raises(ValueError):
        top_value_neurons(tr, 7, n=0)


@pytest.mark.parametrize("seed", range(5))
def test_planted_value_neuron_is_first(seed):
    p = planted_value_model(seed)
    res = top_value_neurons(forward(p.weights, p.tokens), p.target, n=3)
    assert res.ffn[0].id == p.neuron
    assert p.target in [t for t, _ in res.ffn[0].projection.top_tokens]


def test_query_scores_against_manual(model32):
    tr = forward(model32, TOKENS)
    attn_ids = [NeuronId.attn(1, 0, 3), NeuronId.attn(1, 2, 1), NeuronId.attn(0, 1, 1)]
    q = query_scores(model32, tr, attn_ids)
    keys = sum(get_neuron(model32, n).subkey for n in attn_ids if n.layer == 1)
    fc2 = model32["layers.0.ffn.fc2"]
    pos, _ = dominant_positions(tr)
    k = 9
    expect = tr.ffn_coef[0, pos[0, k], k] * float(fc2[:, k].astype(np.float64) @ keys)
    assert q[0, k] == pytest.approx(expect, rel=1e-5)
    assert np.all(q[1] == 0)  # no attention layer after the last FFN
    reports = query_neuron_scores(model32, tr, attn_ids, n=4)
    mags = [abs(r.query_score) for r in reports]
    assert mags == sorted(mags, reverse=True) and reports[0].role == "ffn-query"
    with pytest.raises(ValueError):
        query_scores(model32, tr, [])
    with pytest.raises(ValueError):
        query_scores(model32, tr, [NeuronId.ffn(0, 0)])


def test_head_logit_score(model32):
    tr = forward(model32, TOKENS)
    m = head_logit_scores(tr, 7)
    assert m.shape == (2, 4)
    assert head_logit_score(tr, 1, 2, 7) == pytest.approx(m[1, 2], abs=1e-9)
    masked = forward(mask_head(model32, 1, 2), TOKENS)
    assert head_logit_score(masked, 1, 2, 7) == 0.0
    with pytest.raises(IndexError):
        head_logit_score(tr, 2, 0, 7)


def test_cases_from_pairs(tok):
    w = symmetric_model(tok, seed=2)
    pairs = [PairedCase("The kind member is a man", "The kind member is a gal", "trait", "kind", 1),
             PairedCase("The man is kind", "The gal is kind", "trait", "kind", 3)]
    cases = cases_from_pairs(w, tok, pairs, DESK_GENDERS)
    assert cases[0].tokens == tuple(tok.encode("The kind member is a"))
    assert cases[1].tokens == tuple(tok.encode("The"))
    # the symmetric model ties, and ties go to the first gender
    assert all(c.target == tok.first_token(" man") for c in cases)
    with pytest.raises(DatasetError):
        cases_from_pairs(w, tok, [PairedCase("no gender", "here")], DESK_GENDERS)


def test_aggregate_is_mean_of_cases(model32):
    cases = [Case(tuple(TOKENS), 7), Case((0, 1, 2, 3), 9), Case((0, 4, 4), 7)]
    scores = score_cases(model32, cases)
    agg = Aggregate.from_scores(scores)
    np.testing.assert_allclose(agg.ffn, np.mean([s.ffn for s in scores], axis=0))
    top = aggregate_importance(model32, cases, n=6)
    flat = pooled(model32.config, agg.ffn, agg.attn)
    assert top[0].importance == pytest.approx(flat.max())
    assert [r.importance for r in aggregate_importance(model32, cases, n=3, kind="attn")] == \
        sorted(agg.attn.reshape(-1), reverse=True)[:3]
    assert aggregate_importance(model32, cases, n=6, threads=3)[0].id == top[0].id
    query = aggregate_query_neurons(model32, agg, [r.id for r in top if r.id.kind == "attn"] or [NeuronId.attn(1, 0, 0)], 3)
    assert all(r.id.layer == 0 for r in query if r.query_score > 0)
    with pytest.raises(ValueError):
        aggregate_importance(model32, [], n=3)


def test_head_scores_on_corpus(tok, desk_pairs):
    w = symmetric_model(tok, seed=0)
    pairs = desk_pairs[:8]
    cases = cases_from_pairs(w, tok, pairs, DESK_GENDERS)
    m = aggregate_head_logit_scores(w, cases)
    assert m.shape == (2, 4) and np.isfinite(m).all()
    assert abs(head_causal_score(w, tok, pairs, 0, 1)) < 1e-6


def test_neuron_frequency(model32):
    cases = [Case(tuple(TOKENS), 7), Case((0, 1, 2, 3), 9), Case((0, 4, 4), 7)]
    pts = neuron_frequency(model32, cases, [1, 5, 10], M=10)
    assert [k for k, _ in pts] == [1, 5, 10]
    assert all(0.0 <= f <= 1.0 for _, f in pts)
    single = neuron_frequency(model32, cases[:1], [1, 10], M=10)
    assert all(f == 1.0 for _, f in single)
    with pytest.raises(ValueError):
        neuron_frequency(model32, cases, 11, M=10)


def test_log_softmax_normalizes():
    lp = log_softmax(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0)


def test_dominant_positions_ignore_unembedding_scale(model32):
    scaled = model32.replace(unembedding=model32["unembedding"] * np.float32(7.5))
    a, b = dominant_positions(forward(model32, TOKENS)), dominant_positions(forward(scaled, TOKENS))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
