"""Slow float64 reference forward pass and importance scores.

Written directly from the model equations with explicit per-position loops.
It deliberately shares no code with the package under test: it reads only the
raw tensor dict and a plain config dict.
"""

from __future__ import annotations

import math

import numpy as np


def _norm(x, w, b, family, eps):
    if family == "pre-rmsnorm":
        return x / math.sqrt(float(np.mean(x * x)) + eps) * w
    mu = float(np.mean(x))
    var = float(np.mean((x - mu) ** 2))
    return (x - mu) / math.sqrt(var + eps) * w + b


def _act(v, name):
    if name == "relu":
        return max(v, 0.0)
    if name == "gelu":
        return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))
    if name == "gelu_new":
        return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))
    if name == "silu":
        return v / (1.0 + math.exp(-v))
    raise ValueError(name)


def _rope(vec, pos, theta):
    half = len(vec) // 2
    out = np.empty_like(vec)
    for i in range(half):
        ang = pos * theta ** (-2.0 * i / len(vec))
        c, s = math.cos(ang), math.sin(ang)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def _log_softmax(z):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return np.array([v - lse for v in z])


class Reference:
    def __init__(self, tensors: dict, cfg: dict):
        self.t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.c = cfg

    def _p(self, name):
        return self.t.get(name)

    def run(self, tokens):
        c, t = self.c, self.t
        T, H, dh = len(tokens), c["n_heads"], c["d_head"]
        h = [t["embedding"][tok].copy() for tok in tokens]
        if c["position_family"] == "learned-absolute":
            h = [h[i] + t["pos_embedding"][i] for i in range(T)]
        rec = {"resid_pre": [], "attn": [], "ffn": [], "coef": [], "alpha": [], "values": []}
        for l in range(c["n_layers"]):
            p = f"layers.{l}."
            xs = [_norm(v, t[p + "attn_norm.weight"], self._p(p + "attn_norm.bias"), c["norm_family"], c["norm_eps"]) for v in h]
            attn = [np.zeros(c["d_model"]) for _ in range(T)]
            alphas = np.zeros((H, T, T))
            values = np.zeros((T, H, dh))
            for j in range(H):
                qs, ks, vs = [], [], []
                for i, x in enumerate(xs):
                    q = t[p + "attn.q"][j] @ x
                    k = t[p + "attn.k"][j] @ x
                    v = t[p + "attn.v"][j] @ x
                    if c["use_bias"]:
                        q, k, v = q + t[p + "attn.q_bias"][j], k + t[p + "attn.k_bias"][j], v + t[p + "attn.v_bias"][j]
                    if c["position_family"] == "rotary":
                        q, k = _rope(q, i, c["rope_theta"]), _rope(k, i, c["rope_theta"])
                    qs.append(q)
                    ks.append(k)
                    vs.append(v)
                    values[i, j] = v
                for i in range(T):
                    scores = [float(qs[i] @ ks[s]) / math.sqrt(dh) for s in range(i + 1)]
                    a = np.exp(_log_softmax(scores))
                    alphas[j, i, : i + 1] = a
                    z = sum(a[s] * vs[s] for s in range(i + 1))
                    attn[i] = attn[i] + t[p + "attn.o"][j] @ z
            if c["use_bias"]:
                attn = [a + t[p + "attn.o_bias"] for a in attn]
            mid = [h[i] + attn[i] for i in range(T)]
            ffn, coefs = [], []
            for i in range(T):
                x = _norm(mid[i], t[p + "ffn_norm.weight"], self._p(p + "ffn_norm.bias"), c["norm_family"], c["norm_eps"])
                up = t[p + "ffn.fc1"] @ x
                if c["use_bias"]:
                    up = up + t[p + "ffn.fc1_bias"]
                if c["ffn_family"] == "gated":
                    gate = t[p + "ffn.gate"] @ x
                    m = np.array([_act(g, c["activation"]) * u for g, u in zip(gate, up)])
                else:
                    m = np.array([_act(u, c["activation"]) for u in up])
                out = t[p + "ffn.fc2"] @ m
                if c["use_bias"]:
                    out = out + t[p + "ffn.fc2_bias"]
                ffn.append(out)
                coefs.append(m)
            rec["resid_pre"].append(np.array(h))
            rec["attn"].append(np.array(attn))
            rec["ffn"].append(np.array(ffn))
            rec["coef"].append(np.array(coefs))
            rec["alpha"].append(alphas)
            rec["values"].append(values)
            h = [mid[i] + ffn[i] for i in range(T)]
        rec["final"] = np.array(h)
        rec["logits"] = np.array([self.readout(v) for v in h])
        return rec

    def readout(self, v):
        c = self.c
        x = _norm(v, self.t["final_norm.weight"], self._p("final_norm.bias"), c["norm_family"], c["norm_eps"])
        return self.t["unembedding"] @ x

    def logprob(self, v, target):
        return float(_log_softmax(list(self.readout(v)))[target])

    def importances(self, tokens, target):
        """Brute-force value importance of every neuron: {(kind, l, head, k): score}."""
        rec = self.run(tokens)
        c, t, f = self.c, self.t, len(tokens) - 1
        out = {}
        for l in range(c["n_layers"]):
            base_ffn = rec["resid_pre"][l][f] + rec["attn"][l][f]
            lp0 = self.logprob(base_ffn, target)
            for k in range(c["d_ffn"]):
                v = rec["coef"][l][f][k] * t[f"layers.{l}.ffn.fc2"][:, k]
                out[("ffn", l, None, k)] = self.logprob(base_ffn + v, target) - lp0
            base_attn = rec["resid_pre"][l][f]
            lp0 = self.logprob(base_attn, target)
            for j in range(c["n_heads"]):
                for k in range(c["d_head"]):
                    z = sum(rec["alpha"][l][j, f, s] * rec["values"][l][s, j, k] for s in range(f + 1))
                    v = z * t[f"layers.{l}.attn.o"][j][:, k]
                    out[("attn", l, j, k)] = self.logprob(base_attn + v, target) - lp0
        return out
