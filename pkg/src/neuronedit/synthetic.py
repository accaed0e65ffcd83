"""Small hand-built models with known mechanisms, for tests and demos.

Every constructor is deterministic in its seed. The planted models reserve a
few orthonormal residual directions and project them out of all random
weights, so the planted neurons are the only writers of those directions:

* ``g``  gender direction; the two gender unembeddings differ only along it
* ``r``  carried by every non-start token; read by the planted bias neuron
* ``s``  carried only by the start token; read by the planted general neuron
* ``s2`` written by the general neuron, read by a planted attention neuron
"""

from __future__ import annotations

import random
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .config import ModelConfig, NeuronId
from .datasets import TaskCase, arithmetic_probe, generate_commonwords, sample_wordlists
from .engine import forward, layer_norm
from .tokenizer import Tokenizer, train_bpe
from .weights import TransformerWeights, random_model

DESK_GENDERS = ("man", "gal")
MARKER = " yes"
DISTRACTORS = (" cat", " red", " sun", " box", " pen")
PROBE_PROMPT = "Q: Pick the right word. A:"


@lru_cache(maxsize=1)
def desk_tokenizer() -> Tokenizer:
    """Byte-level BPE trained on the bundled sample prompts.

    The gender terms and probe choices are forced to single tokens.
    """
    corpus = [s for p in generate_commonwords(sample_wordlists(), DESK_GENDERS) for s in (*p.male_side, *p.female_side)]
    corpus += [c.prompt + c.answer_string for c in arithmetic_probe(200, seed=0)]
    corpus += [PROBE_PROMPT + w for w in (MARKER, *DISTRACTORS)]
    force = [" " + g for g in DESK_GENDERS] + [MARKER, *DISTRACTORS]
    return train_bpe(corpus, n_merges=300, force=force)


def desk_config(tokenizer: Tokenizer, **overrides) -> ModelConfig:
    base = dict(
        n_layers=2, d_model=64, n_heads=4, d_head=16, d_ffn=32, vocab_size=tokenizer.vocab_size,
        ffn_family="single-gate", norm_family="pre-rmsnorm", position_family="learned-absolute",
        bos_token_id=tokenizer.bos_token_id, context_length=64, activation="relu",
    )
    base.update(overrides)
    return ModelConfig(**base)


def _gender_ids(tokenizer: Tokenizer, genders=DESK_GENDERS) -> tuple[int, int]:
    return tokenizer.first_token(" " + genders[0]), tokenizer.first_token(" " + genders[1])


def symmetric_model(tokenizer: Tokenizer, seed: int = 0, genders=DESK_GENDERS, **overrides) -> TransformerWeights:
    """A random model that cannot tell the two gender tokens apart.

    Their embedding and unembedding rows are identical, so paired sentences
    that differ only in those tokens get identical scores.
    """
    w = random_model(desk_config(tokenizer, activation="gelu_new", **overrides), seed)
    a, b = _gender_ids(tokenizer, genders)
    emb, unemb = w["embedding"].copy(), w["unembedding"].copy()
    emb[b], unemb[b] = emb[a], unemb[a]
    return w.replace(embedding=emb, unembedding=unemb)


# ---------------------------------------------------------------------------
# planted value neuron


class PlantedValue(NamedTuple):
    weights: TransformerWeights
    tokens: list[int]
    target: int
    neuron: NeuronId


def planted_value_model(seed: int, n_layers: int = 2, d_model: int = 32, vocab_size: int = 64) -> PlantedValue:
    """Random model whose last-layer FFN neuron writes the target's unembedding.

    The neuron's subkey is aligned with its own normalized input at the final
    position, so its coefficient there is large and positive.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=4, d_head=d_model // 4, d_ffn=4 * d_model,
                      vocab_size=vocab_size, ffn_family="single-gate", norm_family="pre-layernorm",
                      position_family="learned-absolute", context_length=32)
    w = random_model(cfg, seed)
    tokens = [0, *rng.integers(1, vocab_size, size=int(rng.integers(4, 12))).tolist()]
    target = int(rng.integers(1, vocab_size))
    layer, k = n_layers - 1, int(rng.integers(cfg.d_ffn))

    trace = forward(w, tokens)
    x = layer_norm(trace.resid_mid(layer)[-1], w.layer(layer, "ffn_norm.weight"), w.layer(layer, "ffn_norm.bias"),
                   cfg.norm_family, cfg.norm_eps)
    fc1 = w.layer(layer, "ffn.fc1").copy()
    fc2 = w.layer(layer, "ffn.fc2").copy()
    fc1[k] = 3.0 * x / float(x @ x)
    u = w["unembedding"][target]
    fc2[:, k] = 10.0 * u / np.linalg.norm(u)
    w = w.replace(**{f"layers.{layer}.ffn.fc1": fc1, f"layers.{layer}.ffn.fc2": fc2})
    return PlantedValue(w, tokens, target, NeuronId.ffn(layer, k))


# ---------------------------------------------------------------------------
# planted bias + general neuron


class PlantedBias(NamedTuple):
    weights: TransformerWeights
    bias_neuron: NeuronId
    general_neuron: NeuronId
    general_attn_neuron: NeuronId


def _directions(d: int, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    dirs = q[:, :n].T.astype(np.float32)
    proj = (np.eye(d) - dirs.T @ dirs).astype(np.float32)
    return dirs, proj


def planted_bias_model(
    tokenizer: Tokenizer,
    seed: int = 0,
    genders=DESK_GENDERS,
    bias_strength: float = 4.0,
) -> PlantedBias:
    """Two-layer model with one gender-bias neuron and one start-position general neuron.

    * bias neuron ``ffn:L1``: fires on every non-start token and writes ``g``,
      raising the male gender token over the female one
    * general neuron ``ffn:L0``: fires only on the start token and writes ``s2``
    * attention neuron ``attn:L1H0:N0``: attends to the start token, reads
      ``s2`` and writes the probe marker's unembedding (plus a little of the
      shared gender direction), which is what makes the marker probe solvable
    """
    cfg = desk_config(tokenizer)
    rng = np.random.default_rng(seed)
    w = random_model(cfg, seed)
    d = cfg.d_model
    (g, r, s, s2, c), proj = _directions(d, rng, 5)
    t = {k: v.copy() for k, v in w.tensors.items()}

    bos = cfg.bos_token_id
    t["embedding"] = t["embedding"] @ proj + 0.5 * r + 0.5 * c
    t["embedding"][bos] = 2.0 * s + 0.5 * c
    t["pos_embedding"] = 0.3 * t["pos_embedding"] @ proj
    male, female = _gender_ids(tokenizer, genders)
    t["embedding"][female] = t["embedding"][male]

    u = t["unembedding"] @ proj
    shared = u[male].copy()
    u[male], u[female] = shared + 2.0 * g, shared - 2.0 * g
    t["unembedding"] = u

    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        t[p + "attn.o"] = np.einsum("de,hek->hdk", proj, t[p + "attn.o"])
        t[p + "ffn.fc2"] = proj @ t[p + "ffn.fc2"]

    general, bias_n, attn_n = NeuronId.ffn(0, 3), NeuronId.ffn(1, 5), NeuronId.attn(1, 0, 0)
    t["layers.0.ffn.fc1"][general.index] = 4.0 * s
    t["layers.0.ffn.fc2"][:, general.index] = 2.0 * s2
    t["layers.1.ffn.fc1"][bias_n.index] = 2.0 * r
    t["layers.1.ffn.fc2"][:, bias_n.index] = bias_strength * g

    # head 0 of layer 1 queries on c and keys on s2, so it looks at the start token
    e = np.zeros(cfg.d_head, np.float32)
    e[0] = 1.0
    t["layers.1.attn.q"][0] = 3.0 * np.outer(e, c)
    t["layers.1.attn.k"][0] = 3.0 * np.outer(e, s2)
    t["layers.1.attn.v"][0, 0] = s2
    marker = u[tokenizer.first_token(MARKER)]
    out = marker / np.linalg.norm(marker) + 0.3 * shared / np.linalg.norm(shared)
    t["layers.1.attn.o"][0, :, 0] = 3.0 * out

    return PlantedBias(TransformerWeights(cfg, t), bias_n, general, attn_n)


def marker_probe(n: int = 100, seed: int = 0) -> list[TaskCase]:
    """Multiple-choice cases whose right answer is always the marker word."""
    rng = random.Random(seed)
    cases = []
    for _ in range(n):
        choices = rng.sample(DISTRACTORS, 3)
        answer = rng.randrange(4)
        choices.insert(answer, MARKER)
        cases.append(TaskCase("mcq", PROBE_PROMPT, tuple(choices), answer))
    return cases


# ---------------------------------------------------------------------------
# CNA chain


class Chain(NamedTuple):
    weights: TransformerWeights
    upstream: NeuronId
    downstream: NeuronId


def chain_model(tokenizer: Tokenizer, seed: int = 0) -> Chain:
    """Upstream layer-0 neuron pushes a downstream layer-1 neuron positive.

    Without it the downstream neuron's pre-activation is negative, so masking
    the upstream neuron flips the sign of the downstream GELU coefficient.
    """
    cfg = desk_config(tokenizer, activation="gelu_new")
    rng = np.random.default_rng(seed)
    w = random_model(cfg, seed)
    (r, z), proj = _directions(cfg.d_model, rng, 2)
    t = {k: v.copy() for k, v in w.tensors.items()}
    t["embedding"] = t["embedding"] @ proj + 1.0 * r - 0.3 * z
    t["pos_embedding"] = 0.3 * t["pos_embedding"] @ proj
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        t[p + "attn.o"] = np.einsum("de,hek->hdk", proj, t[p + "attn.o"])
        t[p + "ffn.fc2"] = proj @ t[p + "ffn.fc2"]
    up, down = NeuronId.ffn(0, 1), NeuronId.ffn(1, 2)
    t["layers.0.ffn.fc1"][up.index] = 2.0 * r
    t["layers.0.ffn.fc2"][:, up.index] = 1.5 * z
    t["layers.1.ffn.fc1"][down.index] = 2.0 * z
    return Chain(TransformerWeights(cfg, t), up, down)
