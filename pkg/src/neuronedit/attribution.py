"""Localize the neurons and heads behind a prediction.

Importance of a neuron for target token ``w`` is the log-probability gain from
adding its final-position contribution to the residual it is added to::

    FFN:   log p(w | m*fc2_k + A^l + h^{l-1}) - log p(w | A^l + h^{l-1})
    attn:  log p(w | v_A + h^{l-1})           - log p(w | h^{l-1})

where probabilities come from the logit lens (final norm, unembedding,
softmax). All rankings break ties by canonical neuron order.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .config import ModelConfig, NeuronId
from .datasets import DEFAULT_GENDERS, DatasetError, PairedCase
from .editing import mask_heads
from .engine import InferenceTrace, forward, logits
from .lens import ProjectionReport, target_logprob, unembed_project
from .metrics import entropy_difference_eval
from .parallel import pmap
from .weights import TransformerWeights, get_neuron

log = logging.getLogger(__name__)

ROLES = ("ffn-value", "attn-value", "ffn-query")
N_TOP = 10


@dataclass
class NeuronReport:
    id: NeuronId
    role: str
    dominant_position: int
    importance: float | None = None
    query_score: float | None = None
    projection: ProjectionReport | None = None

    def to_dict(self, tokenizer=None) -> dict:
        d = {"id": str(self.id), **self.id.to_dict(), "role": self.role, "dominant_position": self.dominant_position}
        if self.importance is not None:
            d["importance"] = self.importance
        if self.query_score is not None:
            d["query_score"] = self.query_score
        if self.projection is not None:
            d.update(self.projection.to_dict(tokenizer))
        return d


@dataclass
class HeadReport:
    layer: int
    head: int
    logit_score: float | None = None
    causal_score: float | None = None


# ---------------------------------------------------------------------------
# per-trace scores


def ffn_importances(trace: InferenceTrace, target: int) -> np.ndarray:
    """Value importance of every FFN neuron, shape (L, N)."""
    w = trace.weights
    c = w.config
    t = trace.final
    out = np.empty((c.n_layers, c.d_ffn), dtype=np.float64)
    for l in range(c.n_layers):
        base = trace.resid_mid(l)[t]
        contrib = trace.ffn_coef[l, t][:, None] * w.layer(l, "ffn.fc2").T  # (N, d)
        out[l] = target_logprob(w, base + contrib, target) - target_logprob(w, base, target)
    return out


def attn_importances(trace: InferenceTrace, target: int) -> np.ndarray:
    """Value importance of every attention neuron, shape (L, H, d_head)."""
    w = trace.weights
    c = w.config
    out = np.empty((c.n_layers, c.n_heads, c.d_head), dtype=np.float64)
    for l in range(c.n_layers):
        base = trace.resid_pre[l][trace.final]
        base_lp = target_logprob(w, base, target)
        o = w.layer(l, "attn.o")
        for j in range(c.n_heads):
            z = trace.head_coefficients(l, j)
            contrib = z[:, None] * o[j].T  # (dh, d)
            out[l, j] = target_logprob(w, base + contrib, target) - base_lp
    return out


def _check_target(trace: InferenceTrace, target: int) -> None:
    if not 0 <= target < trace.weights.config.vocab_size:
        raise IndexError(f"target token {target} outside vocabulary")


def ffn_value_importance(trace: InferenceTrace, neuron: NeuronId, target: int) -> float:
    if neuron.kind != "ffn":
        raise ValueError(f"{neuron} is not an FFN neuron")
    neuron.check_bounds(trace.weights.config)
    _check_target(trace, target)
    w, l, t = trace.weights, neuron.layer, trace.final
    base = trace.resid_mid(l)[t]
    v = trace.ffn_coef[l, t, neuron.index] * w.layer(l, "ffn.fc2")[:, neuron.index]
    return float(target_logprob(w, base + v, target) - target_logprob(w, base, target))


def attn_value_importance(trace: InferenceTrace, neuron: NeuronId, target: int) -> float:
    if neuron.kind != "attn":
        raise ValueError(f"{neuron} is not an attention neuron")
    neuron.check_bounds(trace.weights.config)
    _check_target(trace, target)
    w, l = trace.weights, neuron.layer
    base = trace.resid_pre[l][trace.final]
    z = trace.head_coefficients(l, neuron.head)[neuron.index]
    v = z * w.layer(l, "attn.o")[neuron.head, :, neuron.index]
    return float(target_logprob(w, base + v, target) - target_logprob(w, base, target))


def dominant_positions(trace: InferenceTrace) -> tuple[np.ndarray, np.ndarray]:
    """Dominant source position of every FFN neuron (L, N) and attention neuron (L, H, dh).

    FFN: the position with the largest |coefficient|. Attention: the source
    position with the largest alpha * |subkey . input| seen from the final
    query. ``argmax`` keeps the earliest position on ties.
    """
    ffn = np.argmax(np.abs(trace.ffn_coef), axis=1)  # (L, N)
    alpha = trace.attn_pattern[:, :, trace.final, :]  # (L, H, T)
    weighted = alpha.transpose(0, 2, 1)[..., None] * np.abs(trace.values)  # (L, T, H, dh)
    attn = np.argmax(weighted, axis=1)
    return ffn, attn


def dominant_position(trace: InferenceTrace, neuron: NeuronId) -> int:
    neuron.check_bounds(trace.weights.config)
    if neuron.kind == "ffn":
        return int(np.argmax(np.abs(trace.ffn_coef[neuron.layer, :, neuron.index])))
    alpha = trace.attn_pattern[neuron.layer, neuron.head, trace.final]
    return int(np.argmax(alpha * np.abs(trace.values[neuron.layer, :, neuron.head, neuron.index])))


# ---------------------------------------------------------------------------
# ranking


def _ffn_id(c: ModelConfig, flat: int) -> NeuronId:
    return NeuronId.ffn(*divmod(int(flat), c.d_ffn))


def _attn_id(c: ModelConfig, flat: int) -> NeuronId:
    l, j, k = np.unravel_index(int(flat), (c.n_layers, c.n_heads, c.d_head))
    return NeuronId.attn(l, j, k)


def pooled(c: ModelConfig, ffn: np.ndarray, attn: np.ndarray) -> np.ndarray:
    """Concatenate per-layer FFN and attention arrays in canonical neuron order."""
    return np.concatenate([ffn.reshape(c.n_layers, -1), attn.reshape(c.n_layers, -1)], axis=1).reshape(-1)


def pooled_id(c: ModelConfig, flat: int) -> NeuronId:
    per_layer = c.d_ffn + c.n_heads * c.d_head
    l, r = divmod(int(flat), per_layer)
    if r < c.d_ffn:
        return NeuronId.ffn(l, r)
    j, k = divmod(r - c.d_ffn, c.d_head)
    return NeuronId.attn(l, j, k)


def _projection(weights: TransformerWeights, nid: NeuronId, n_top: int) -> ProjectionReport | None:
    if n_top <= 0:
        return None
    return unembed_project(weights, get_neuron(weights, nid).subvalue, n_top)


def rank(scores: np.ndarray, n: int | None = None) -> np.ndarray:
    """Indices by descending score; equal scores keep index (canonical) order."""
    order = np.argsort(-np.asarray(scores).reshape(-1), kind="stable")
    return order if n is None else order[:n]


@dataclass
class ValueNeurons:
    ffn: list[NeuronReport]
    attn: list[NeuronReport]


def top_value_neurons(trace: InferenceTrace, target: int, n: int, n_top: int = N_TOP) -> ValueNeurons:
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_target(trace, target)
    w, c = trace.weights, trace.weights.config
    ffn_imp, attn_imp = ffn_importances(trace, target), attn_importances(trace, target)
    ffn_pos, attn_pos = dominant_positions(trace)
    ffn_reports = []
    for i in rank(ffn_imp, n):
        nid = _ffn_id(c, i)
        ffn_reports.append(NeuronReport(
            nid, "ffn-value", int(ffn_pos.reshape(-1)[i]), importance=float(ffn_imp.reshape(-1)[i]),
            projection=_projection(w, nid, n_top),
        ))
    attn_reports = []
    for i in rank(attn_imp, n):
        nid = _attn_id(c, i)
        attn_reports.append(NeuronReport(
            nid, "attn-value", int(attn_pos.reshape(-1)[i]), importance=float(attn_imp.reshape(-1)[i]),
            projection=_projection(w, nid, n_top),
        ))
    return ValueNeurons(ffn_reports, attn_reports)


def _query_projection(weights: TransformerWeights, attn_value_neurons: Sequence) -> np.ndarray:
    """fc2_k . (sum of attention subkeys in later layers), shape (L, N)."""
    c = weights.config
    ids = [r.id if isinstance(r, NeuronReport) else r for r in attn_value_neurons]
    if not ids:
        raise ValueError("no attention value neurons given")
    keys_by_layer = np.zeros((c.n_layers, c.d_model), dtype=np.float64)
    for nid in ids:
        if nid.kind != "attn":
            raise ValueError(f"{nid} is not an attention neuron")
        keys_by_layer[nid.layer] += get_neuron(weights, nid).subkey
    # an FFN in layer l can only feed attention in layers > l
    later = np.cumsum(keys_by_layer[::-1], axis=0)[::-1]
    later = np.vstack([later[1:], np.zeros((1, c.d_model))])
    out = np.empty((c.n_layers, c.d_ffn), dtype=np.float64)
    for l in range(c.n_layers):
        out[l] = weights.layer(l, "ffn.fc2").T.astype(np.float64) @ later[l]
    return out


def query_scores(weights: TransformerWeights, trace: InferenceTrace, attn_value_neurons: Sequence) -> np.ndarray:
    """Signed query score of every FFN neuron, shape (L, N)."""
    proj = _query_projection(weights, attn_value_neurons)
    ffn_pos, _ = dominant_positions(trace)
    coef = np.take_along_axis(trace.ffn_coef, ffn_pos[:, None, :], axis=1)[:, 0, :]
    return coef.astype(np.float64) * proj


def query_neuron_scores(
    weights: TransformerWeights, trace: InferenceTrace, attn_value_neurons: Sequence, n: int | None = None, n_top: int = N_TOP
) -> list[NeuronReport]:
    """FFN neurons ranked by |query score| against the given attention value neurons."""
    scores = query_scores(weights, trace, attn_value_neurons)
    ffn_pos, _ = dominant_positions(trace)
    c = weights.config
    reports = []
    for i in rank(np.abs(scores), n):
        nid = _ffn_id(c, i)
        reports.append(NeuronReport(
            nid, "ffn-query", int(ffn_pos.reshape(-1)[i]), query_score=float(scores.reshape(-1)[i]),
            projection=_projection(weights, nid, n_top),
        ))
    return reports


# ---------------------------------------------------------------------------
# heads


def head_logit_score(trace: InferenceTrace, layer: int, head: int, target: int) -> float:
    c = trace.weights.config
    if not (0 <= layer < c.n_layers and 0 <= head < c.n_heads):
        raise IndexError(f"head L{layer}H{head} out of range")
    _check_target(trace, target)
    base = trace.resid_pre[layer][trace.final]
    out = trace.head_output(layer, head)
    return float(target_logprob(trace.weights, base + out, target) - target_logprob(trace.weights, base, target))


def head_logit_scores(trace: InferenceTrace, target: int) -> np.ndarray:
    c = trace.weights.config
    out = np.empty((c.n_layers, c.n_heads))
    for l in range(c.n_layers):
        base = trace.resid_pre[l][trace.final]
        vecs = np.stack([base + trace.head_output(l, j) for j in range(c.n_heads)])
        out[l] = target_logprob(trace.weights, vecs, target) - target_logprob(trace.weights, base, target)
    return out


def aggregate_head_logit_scores(weights: TransformerWeights, cases: Sequence["Case"], threads: int | None = 1) -> np.ndarray:
    """Mean head logit score over cases, shape (L, H)."""
    if not cases:
        raise ValueError("no cases")
    per_case = pmap(lambda cs: head_logit_scores(forward(weights, cs.tokens), cs.target), cases, threads)
    return np.mean(np.stack(per_case), axis=0)


def head_causal_score(weights: TransformerWeights, tokenizer, dataset: list[PairedCase], layer: int, head: int,
                      threads: int | None = 1, baseline: float | None = None) -> float:
    """Drop in mean |entropy difference| when the head's output projection is zeroed."""
    if not dataset:
        raise ValueError("empty dataset")
    if baseline is None:
        baseline = entropy_difference_eval(weights, tokenizer, dataset, threads).mean_abs_entropy_diff
    masked = mask_heads(weights, [(layer, head)])
    return baseline - entropy_difference_eval(masked, tokenizer, dataset, threads).mean_abs_entropy_diff


def head_causal_scores(weights: TransformerWeights, tokenizer, dataset: list[PairedCase], threads: int | None = 1) -> np.ndarray:
    c = weights.config
    baseline = entropy_difference_eval(weights, tokenizer, dataset, threads).mean_abs_entropy_diff
    out = np.empty((c.n_layers, c.n_heads))
    for l in range(c.n_layers):
        for j in range(c.n_heads):
            out[l, j] = head_causal_score(weights, tokenizer, dataset, l, j, threads, baseline)
    return out


# ---------------------------------------------------------------------------
# corpus level


class Case(NamedTuple):
    tokens: tuple[int, ...]
    target: int


def _last_term(sentence: str, term: str) -> re.Match | None:
    found = None
    for m in re.finditer(rf"(?<!\w){re.escape(term)}(?!\w)", sentence):
        found = m
    return found


def cases_from_pairs(weights: TransformerWeights, tokenizer, pairs: list[PairedCase],
                     genders: tuple[str, str] = DEFAULT_GENDERS) -> list[Case]:
    """Cut each pair at its gender slot and target the gender the model favours there.

    The prompt is the male sentence up to the last occurrence of the male term;
    the target is whichever gender's first sub-token has the larger logit at
    the prompt's final position (male on an exact tie).
    """
    male, female = genders
    cases = []
    for p in pairs:
        m = _last_term(p.male_sentence, male)
        if m is None:
            raise DatasetError(f"gender term {male!r} not found in {p.male_sentence!r}")
        prefix = p.male_sentence[: m.start()]
        space = " " if prefix.endswith(" ") else ""
        prompt = prefix.rstrip() if space else prefix
        ids = tuple(tokenizer.encode(prompt))
        t_male = tokenizer.first_token(space + male)
        t_female = tokenizer.first_token(space + female)
        final = logits(weights, ids)[-1]
        cases.append(Case(ids, t_male if final[t_male] >= final[t_female] else t_female))
    return cases


@dataclass
class CaseScores:
    ffn: np.ndarray  # (L, N) value importance
    attn: np.ndarray  # (L, H, dh)
    ffn_pos: np.ndarray
    attn_pos: np.ndarray
    ffn_dom_coef: np.ndarray  # coefficient at each FFN neuron's dominant position

    def pooled(self, c: ModelConfig) -> np.ndarray:
        return pooled(c, self.ffn, self.attn)


def score_case(weights: TransformerWeights, case: Case) -> CaseScores:
    trace = forward(weights, case.tokens)
    ffn_pos, attn_pos = dominant_positions(trace)
    coef = np.take_along_axis(trace.ffn_coef, ffn_pos[:, None, :], axis=1)[:, 0, :]
    return CaseScores(ffn_importances(trace, case.target), attn_importances(trace, case.target), ffn_pos, attn_pos, coef)


def score_cases(weights: TransformerWeights, cases: Sequence[Case], threads: int | None = 1) -> list[CaseScores]:
    if not cases:
        raise ValueError("no cases")
    return pmap(lambda cs: score_case(weights, cs), cases, threads)


def _mode(positions: list[np.ndarray]) -> np.ndarray:
    # most common position across cases; smallest wins ties
    return stats.mode(np.stack(positions), axis=0, keepdims=False).mode


@dataclass
class Aggregate:
    """Mean per-neuron scores over a set of cases."""

    ffn: np.ndarray
    attn: np.ndarray
    ffn_pos: np.ndarray
    attn_pos: np.ndarray
    ffn_abs_dom_coef: np.ndarray
    n_cases: int

    @classmethod
    def from_scores(cls, scores: list[CaseScores]) -> "Aggregate":
        # summed in case order, so the result does not depend on thread count
        return cls(
            ffn=np.mean(np.stack([s.ffn for s in scores]), axis=0),
            attn=np.mean(np.stack([s.attn for s in scores]), axis=0),
            ffn_pos=_mode([s.ffn_pos for s in scores]),
            attn_pos=_mode([s.attn_pos for s in scores]),
            ffn_abs_dom_coef=np.mean(np.stack([np.abs(s.ffn_dom_coef) for s in scores]), axis=0),
            n_cases=len(scores),
        )


def _reports(weights, agg: Aggregate, kind: str | None, n: int, n_top: int) -> list[NeuronReport]:
    c = weights.config
    if kind == "ffn":
        scores, pos, to_id, role = agg.ffn.reshape(-1), agg.ffn_pos.reshape(-1), lambda i: _ffn_id(c, i), lambda _: "ffn-value"
    elif kind == "attn":
        scores, pos, to_id, role = agg.attn.reshape(-1), agg.attn_pos.reshape(-1), lambda i: _attn_id(c, i), lambda _: "attn-value"
    elif kind is None:
        scores, pos = pooled(c, agg.ffn, agg.attn), pooled(c, agg.ffn_pos, agg.attn_pos)
        to_id = lambda i: pooled_id(c, i)  # noqa: E731
        role = lambda nid: f"{nid.kind}-value"  # noqa: E731
    else:
        raise ValueError(f"unknown neuron kind {kind!r}")
    out = []
    for i in rank(scores, n):
        nid = to_id(i)
        out.append(NeuronReport(nid, role(nid), int(pos[i]), importance=float(scores[i]),
                                projection=_projection(weights, nid, n_top)))
    return out


def aggregate_importance(
    weights: TransformerWeights,
    cases: Sequence[Case],
    n: int,
    kind: str | None = None,
    threads: int | None = 1,
    n_top: int = N_TOP,
) -> list[NeuronReport]:
    """Top ``n`` neurons by mean value importance over ``cases``.

    ``kind`` restricts the ranking to "ffn" or "attn" neurons; by default both
    are pooled. A neuron's dominant position is its most frequent one.
    """
    if not cases:
        raise ValueError("no cases")
    agg = Aggregate.from_scores(score_cases(weights, cases, threads))
    return _reports(weights, agg, kind, n, n_top)


def aggregate_query_neurons(weights: TransformerWeights, agg: Aggregate, attn_value_neurons: Sequence,
                            n: int, n_top: int = N_TOP) -> list[NeuronReport]:
    """FFN neurons ranked by mean |query score| over the aggregated cases."""
    scores = agg.ffn_abs_dom_coef * np.abs(_query_projection(weights, attn_value_neurons))
    c = weights.config
    out = []
    for i in rank(scores, n):
        nid = _ffn_id(c, i)
        out.append(NeuronReport(nid, "ffn-query", int(agg.ffn_pos.reshape(-1)[i]), query_score=float(scores.reshape(-1)[i]),
                                projection=_projection(weights, nid, n_top)))
    return out


def neuron_frequency(
    weights: TransformerWeights,
    cases: Sequence[Case],
    K: int | Sequence[int],
    M: int,
    threads: int | None = 1,
    scores: list[CaseScores] | None = None,
) -> list[tuple[int, float]]:
    """How often the corpus-level top-K neurons sit in each case's top M.

    Returns one (K, fraction) point per requested K: the mean over the K
    neurons of the share of cases that rank the neuron within their top M.
    """
    Ks = [K] if isinstance(K, int) else list(K)
    if any(k < 1 for k in Ks) or any(k > M for k in Ks):
        raise ValueError("need 1 <= K <= M")
    c = weights.config
    scores = scores if scores is not None else score_cases(weights, cases, threads)
    per_case = np.stack([s.pooled(c) for s in scores])  # (C, n_neurons)
    in_top = np.zeros_like(per_case, dtype=bool)
    for i, row in enumerate(per_case):
        in_top[i, rank(row, M)] = True
    share = in_top.mean(axis=0)
    order = rank(per_case.mean(axis=0))
    return [(k, float(share[order[:k]].mean())) for k in Ks]
