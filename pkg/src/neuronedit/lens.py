"""Logit-lens readout: project residual-space vectors through final norm and unembedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import final_norm, log_softmax, softmax
from .weights import TransformerWeights

_CHUNK = 256


def _unembed64(weights: TransformerWeights) -> np.ndarray:
    # cached on the instance; weights are immutable by convention
    cache = weights.__dict__.get("_unembed64")
    if cache is None:
        cache = weights["unembedding"].astype(np.float64)
        weights.__dict__["_unembed64"] = cache
    return cache


def readout_logits(weights: TransformerWeights, x: np.ndarray) -> np.ndarray:
    """Final-norm then unembed; ``x`` is (d,) or (n, d). Float64 result.

    The final norm runs in the engine's precision for ``x`` (fp32 unless
    ``x`` is float64); the unembedding product is always float64.
    """
    normed = final_norm(weights, np.asarray(x)).astype(np.float64)
    return normed @ _unembed64(weights).T


def target_logprob(weights: TransformerWeights, x: np.ndarray, target: int) -> np.ndarray:
    """log p(target | x) for one vector or each row of a matrix."""
    x = np.asarray(x)
    single = x.ndim == 1
    rows = x[None] if single else x
    out = np.empty(len(rows), dtype=np.float64)
    for s in range(0, len(rows), _CHUNK):
        lp = log_softmax(readout_logits(weights, rows[s : s + _CHUNK]))
        out[s : s + _CHUNK] = lp[:, target]
    return out[0] if single else out


@dataclass
class ProjectionReport:
    """Tokens a vector promotes most (``top_tokens``, descending probability)
    and least (``last_tokens``, ascending)."""

    top_tokens: list[tuple[int, float]]
    last_tokens: list[tuple[int, float]]

    def to_dict(self, tokenizer=None) -> dict:
        def fmt(items):
            if tokenizer is None:
                return [{"id": t, "p": p} for t, p in items]
            return [{"id": t, "token": tokenizer.token_str(t), "p": p} for t, p in items]

        return {"top_tokens": fmt(self.top_tokens), "last_tokens": fmt(self.last_tokens)}


def unembed_project(weights: TransformerWeights, vector: np.ndarray, n_top: int = 10) -> ProjectionReport:
    vector = np.asarray(vector)
    if vector.shape != (weights.config.d_model,):
        raise ValueError(f"vector shape {vector.shape} does not match d_model={weights.config.d_model}")
    p = softmax(readout_logits(weights, vector))
    # stable sort keeps ties in token-id order
    desc = np.argsort(-p, kind="stable")[:n_top]
    asc = np.argsort(p, kind="stable")[:n_top]
    return ProjectionReport(
        [(int(t), float(p[t])) for t in desc],
        [(int(t), float(p[t])) for t in asc],
    )
