"""Instrumented forward pass.

Every residual term is recorded: for layer ``l`` and position ``i``::

    resid_pre[l, i] + attn_out[l, i] + ffn_out[l, i] == resid_pre[l + 1, i]

``attn_out`` and ``ffn_out`` are the terms actually added to the residual
stream, i.e. computed from the normalized input of their sublayer. The layer
norms are thereby folded into the sublayer outputs and the decomposition is
exact by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .config import NeuronId
from .weights import TransformerWeights


class EngineError(ValueError):
    pass


def _compute_dtype(x: np.ndarray) -> np.ndarray:
    # float64 inputs stay float64 (reference precision); everything else runs in fp32
    return x if x.dtype == np.float64 else x.astype(np.float32, copy=False)


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, family: str, eps: float) -> np.ndarray:
    x = _compute_dtype(np.asarray(x))
    if family == "pre-rmsnorm":
        rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
        return (x / rms) * weight
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    out = xc / np.sqrt(var + x.dtype.type(eps)) * weight
    return out + bias if bias is not None else out


def activation(x: np.ndarray, name: str) -> np.ndarray:
    f = x.dtype.type
    if name == "gelu_new":
        c = f(np.sqrt(2.0 / np.pi))
        return f(0.5) * x * (f(1.0) + np.tanh(c * (x + f(0.044715) * x**3)))
    if name == "gelu":
        return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)
    if name == "relu":
        return np.maximum(x, f(0.0))
    if name == "silu":
        return x / (f(1.0) + np.exp(-x))
    raise EngineError(f"unknown activation {name!r}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def _rotary(x: np.ndarray, theta: float) -> np.ndarray:
    # x: (H, T, dh); rotate-half convention
    dh = x.shape[-1]
    T = x.shape[1]
    inv = 1.0 / (theta ** (np.arange(0, dh, 2, dtype=np.float64) / dh))
    ang = np.outer(np.arange(T, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    half = dh // 2
    rot = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rot * sin


def final_norm(weights: TransformerWeights, x: np.ndarray) -> np.ndarray:
    c = weights.config
    return layer_norm(x, weights["final_norm.weight"], weights.get("final_norm.bias"), c.norm_family, c.norm_eps)


@dataclass
class InferenceTrace:
    """Per-layer, per-position record of one forward pass.

    Shapes: ``embed`` (T, d); ``resid_pre``, ``attn_out``, ``ffn_out`` (L, T, d);
    ``attn_pattern`` (L, H, T, T) indexed [layer, head, query, source];
    ``values`` (L, T, H, d_head) = attention subkey inner products with the
    normalized source residual (plus value bias); ``ffn_coef`` (L, T, N);
    ``logits`` (T, B).
    """

    weights: TransformerWeights
    tokens: np.ndarray
    embed: np.ndarray
    resid_pre: np.ndarray
    attn_out: np.ndarray
    ffn_out: np.ndarray
    resid_final: np.ndarray
    attn_pattern: np.ndarray
    values: np.ndarray
    ffn_coef: np.ndarray
    logits: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def final(self) -> int:
        return len(self.tokens) - 1

    def resid_mid(self, layer: int) -> np.ndarray:
        """h^{l-1} + A^l for every position: the FFN sublayer's residual input."""
        return self.resid_pre[layer] + self.attn_out[layer]

    def resid_post(self, layer: int) -> np.ndarray:
        if layer + 1 < len(self.resid_pre):
            return self.resid_pre[layer + 1]
        return self.resid_final

    @property
    def probs(self) -> np.ndarray:
        """Next-token distribution Y at the final position."""
        return softmax(self.logits[-1].astype(np.float64))

    def head_coefficients(self, layer: int, head: int, position: int | None = None) -> np.ndarray:
        """alpha-weighted total coefficient of every neuron of a head at a query position."""
        pos = self.final if position is None else position
        return self.attn_pattern[layer, head, pos] @ self.values[layer, :, head, :]

    def head_output(self, layer: int, head: int, position: int | None = None) -> np.ndarray:
        o = self.weights.layer(layer, "attn.o")[head]
        return o @ self.head_coefficients(layer, head, position)

    def to_json(self, path) -> None:
        """Debug dump; arrays become nested lists."""
        out = {
            k: getattr(self, k).tolist()
            for k in ("tokens", "embed", "resid_pre", "attn_out", "ffn_out", "resid_final", "attn_pattern", "values", "ffn_coef", "logits")
        }
        with open(path, "w") as f:
            json.dump(out, f)


def _check_tokens(weights: TransformerWeights, tokens: Sequence[int]) -> np.ndarray:
    c = weights.config
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise EngineError("empty token sequence")
    if ids.size > c.context_length:
        raise EngineError(f"{ids.size} tokens exceed the context length {c.context_length}")
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        raise EngineError("token id outside the vocabulary")
    return ids


def _run(
    weights: TransformerWeights,
    tokens: Sequence[int],
    record: bool,
    ablate_heads: Iterable[tuple[int, int]] = (),
    dtype=np.float32,
):
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise EngineError(f"unsupported compute dtype {dtype}")
    c = weights.config
    ids = _check_tokens(weights, tokens)
    T, d, H, dh = ids.size, c.d_model, c.n_heads, c.d_head
    ablate = set(ablate_heads)

    h = weights["embedding"][ids].astype(dtype)
    if c.position_family == "learned-absolute":
        h = h + weights["pos_embedding"][:T]
    embed = h.copy()

    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = dtype.type(1.0 / np.sqrt(dh))
    if record:
        L = c.n_layers
        resid_pre = np.empty((L, T, d), dtype)
        attn_outs = np.empty((L, T, d), dtype)
        ffn_outs = np.empty((L, T, d), dtype)
        patterns = np.empty((L, H, T, T), dtype)
        values = np.empty((L, T, H, dh), dtype)
        coefs = np.empty((L, T, c.d_ffn), dtype)

    for l in range(c.n_layers):
        lw = lambda name: weights.layer(l, name)  # noqa: E731
        x = layer_norm(h, lw("attn_norm.weight"), lw("attn_norm.bias"), c.norm_family, c.norm_eps)
        q = np.einsum("hkd,td->htk", lw("attn.q"), x)
        k = np.einsum("hkd,td->htk", lw("attn.k"), x)
        v = np.einsum("hkd,td->htk", lw("attn.v"), x)
        if c.use_bias:
            q = q + lw("attn.q_bias")[:, None, :]
            k = k + lw("attn.k_bias")[:, None, :]
            v = v + lw("attn.v_bias")[:, None, :]
        if c.position_family == "rotary":
            q = _rotary(q, c.rope_theta)
            k = _rotary(k, c.rope_theta)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores[:, causal] = -np.inf
        pattern = softmax(scores, axis=-1)
        z = pattern @ v  # (H, T, dh)
        head_out = np.einsum("hdk,htk->htd", lw("attn.o"), z)
        for layer, head in ablate:
            if layer == l:
                head_out[head] = 0.0
        attn = head_out.sum(axis=0)
        if c.use_bias:
            attn = attn + lw("attn.o_bias")

        mid = h + attn
        x2 = layer_norm(mid, lw("ffn_norm.weight"), lw("ffn_norm.bias"), c.norm_family, c.norm_eps)
        up = x2 @ lw("ffn.fc1").T
        if c.use_bias:
            up = up + lw("ffn.fc1_bias")
        if c.gated:
            coef = activation(x2 @ lw("ffn.gate").T, c.activation) * up
        else:
            coef = activation(up, c.activation)
        ffn = coef @ lw("ffn.fc2").T
        if c.use_bias:
            ffn = ffn + lw("ffn.fc2_bias")

        if record:
            resid_pre[l] = h
            attn_outs[l] = attn
            ffn_outs[l] = ffn
            patterns[l] = pattern
            values[l] = v.transpose(1, 0, 2)
            coefs[l] = coef
        h = mid + ffn

    logits = final_norm(weights, h) @ weights["unembedding"].T
    if not record:
        return logits
    return InferenceTrace(
        weights=weights, tokens=ids, embed=embed, resid_pre=resid_pre, attn_out=attn_outs,
        ffn_out=ffn_outs, resid_final=h, attn_pattern=patterns, values=values,
        ffn_coef=coefs, logits=logits,
    )


def forward(weights: TransformerWeights, tokens: Sequence[int], ablate_heads: Iterable[tuple[int, int]] = (),
            dtype=np.float32) -> InferenceTrace:
    """Run the model and record the full trace.

    ``ablate_heads`` removes the listed (layer, head) outputs at run time, an
    activation-level counterpart of zeroing the head's output projection.
    ``dtype=np.float64`` runs the whole pass (and any attribution read off the
    trace) at reference precision; weights are upcast on the fly.
    """
    return _run(weights, tokens, True, ablate_heads, dtype)


def logits(weights: TransformerWeights, tokens: Sequence[int], dtype=np.float32) -> np.ndarray:
    """Logits (T, B) at every position, without recording a trace."""
    return _run(weights, tokens, False, (), dtype)


def ffn_coefficients(trace: InferenceTrace, layer: int) -> np.ndarray:
    if not 0 <= layer < trace.weights.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    return trace.ffn_coef[layer]


@dataclass
class PositionedContribution:
    neuron: NeuronId
    position: int
    vector: np.ndarray
    coefficient: float


def attn_neuron_contributions(trace: InferenceTrace, layer: int, head: int, position: int | None = None) -> list[PositionedContribution]:
    """Contribution of every (neuron, source position) pair to one head's output
    at the query ``position`` (default: final)."""
    c = trace.weights.config
    if not 0 <= layer < c.n_layers or not 0 <= head < c.n_heads:
        raise IndexError(f"head L{layer}H{head} out of range")
    pos = trace.final if position is None else position
    if not 0 <= pos < trace.n_tokens:
        raise IndexError(f"position {pos} out of range")
    o = trace.weights.layer(layer, "attn.o")[head]
    alpha = trace.attn_pattern[layer, head, pos]
    out = []
    for k in range(c.d_head):
        for p in range(pos + 1):
            coef = alpha[p] * trace.values[layer, p, head, k]
            out.append(PositionedContribution(NeuronId.attn(layer, head, k), p, coef * o[:, k], float(coef)))
    return out


def sequence_nll(weights: TransformerWeights, ids: Sequence[int]) -> float:
    """Sum of -log p(x_t | x_<t) over every token after the first."""
    if len(ids) < 2:
        raise EngineError("need at least two tokens to score a sequence")
    lp = log_softmax(logits(weights, ids)[:-1])
    nxt = np.asarray(ids[1:])
    return float(-lp[np.arange(len(nxt)), nxt].sum())


def char_normalized_entropy(weights: TransformerWeights, tokenizer, text: str) -> float:
    """Sentence negative log-likelihood (nats) divided by its character count."""
    if not text:
        raise EngineError("empty text")
    ids = tokenizer.encode(text)
    if len(ids) < 2:
        raise EngineError(f"{text!r} has fewer than two tokens")
    return sequence_nll(weights, ids) / len(text)


def greedy_decode(weights: TransformerWeights, ids: Sequence[int], max_new_tokens: int) -> list[int]:
    ids = list(ids)
    out = []
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(logits(weights, ids + out)[-1]))
        out.append(nxt)
    return out
