"""Hard-zero neuron and head edits, and comparative neuron analysis (CNA)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import NeuronId
from .engine import InferenceTrace, forward
from .lens import unembed_project
from .weights import TransformerWeights, get_neuron


SIGN_ATOL = 1e-6


class EditError(ValueError):
    pass


def mask_neurons(weights: TransformerWeights, ids: Iterable[NeuronId]) -> TransformerWeights:
    """Zero each neuron's subkey and subvalue (and its biases).

    Only the touched tensors are copied; ``weights`` itself is never modified.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise EditError("duplicate neuron ids in mask set")
    edited: dict[str, np.ndarray] = {}

    def tensor(name: str) -> np.ndarray | None:
        if name not in edited:
            src = weights.get(name)
            if src is None:
                return None
            edited[name] = src.copy()
        return edited[name]

    for nid in ids:
        try:
            nid.check_bounds(weights.config)
        except IndexError as e:
            raise EditError(str(e)) from None
        p = f"layers.{nid.layer}."
        k = nid.index
        if nid.kind == "ffn":
            tensor(p + "ffn.fc1")[k] = 0.0
            tensor(p + "ffn.fc2")[:, k] = 0.0
            if weights.config.gated:
                tensor(p + "ffn.gate")[k] = 0.0
            if weights.config.use_bias:
                tensor(p + "ffn.fc1_bias")[k] = 0.0
        else:
            j = nid.head
            tensor(p + "attn.v")[j, k] = 0.0
            tensor(p + "attn.o")[j, :, k] = 0.0
            if weights.config.use_bias:
                tensor(p + "attn.v_bias")[j, k] = 0.0
    return weights.replace(**edited)


def mask_heads(weights: TransformerWeights, heads: Iterable[tuple[int, int]]) -> TransformerWeights:
    """Zero the output projection slice of each (layer, head)."""
    c = weights.config
    edited: dict[str, np.ndarray] = {}
    for layer, head in heads:
        if not (0 <= layer < c.n_layers and 0 <= head < c.n_heads):
            raise EditError(f"head L{layer}H{head} out of range")
        name = f"layers.{layer}.attn.o"
        if name not in edited:
            edited[name] = weights[name].copy()
        edited[name][head] = 0.0
    return weights.replace(**edited)


def mask_head(weights: TransformerWeights, layer: int, head: int) -> TransformerWeights:
    return mask_heads(weights, [(layer, head)])


def neuron_coefficient(trace: InferenceTrace, nid: NeuronId, position: int | None = None) -> float:
    """Coefficient of a neuron at a query position (default final).

    For attention neurons this is the alpha-weighted sum over source positions.
    """
    pos = trace.final if position is None else position
    if nid.kind == "ffn":
        return float(trace.ffn_coef[nid.layer, pos, nid.index])
    return float(trace.head_coefficients(nid.layer, nid.head, pos)[nid.index])


@dataclass
class CnaRow:
    neuron: NeuronId
    coef_before: float
    coef_after: float
    top_tokens: list[int]

    @property
    def sign_flipped(self) -> bool:
        # a coefficient driven to ~0 has no sign
        if min(abs(self.coef_before), abs(self.coef_after)) <= SIGN_ATOL:
            return False
        return (self.coef_before > 0) != (self.coef_after > 0)


def cna_compare(
    weights: TransformerWeights,
    mask_ids: Iterable[NeuronId],
    prompt: str | Sequence[int],
    watch_ids: Iterable[NeuronId],
    tokenizer=None,
    n_top: int = 10,
) -> list[CnaRow]:
    """Coefficients of watched neurons before and after masking ``mask_ids``."""
    mask_ids = list(mask_ids)
    watch_ids = list(watch_ids)
    if not watch_ids:
        raise EditError("no neurons to watch")
    overlap = set(mask_ids) & set(watch_ids)
    if overlap:
        raise EditError(f"watched neuron {sorted(overlap)[0]} is also masked")
    tokens = tokenizer.encode(prompt) if isinstance(prompt, str) else list(prompt)
    before = forward(weights, tokens)
    after = forward(mask_neurons(weights, mask_ids), tokens)
    rows = []
    for nid in watch_ids:
        proj = unembed_project(weights, get_neuron(weights, nid).subvalue, n_top)
        rows.append(CnaRow(nid, neuron_coefficient(before, nid), neuron_coefficient(after, nid),
                           [t for t, _ in proj.top_tokens]))
    return rows
