"""Transformer weights: layout, container I/O, construction and neuron access.

Tensor layout (all fp32 in memory)::

    embedding                  (B, d)
    unembedding                (B, d)
    pos_embedding              (context_length, d)     learned-absolute only
    final_norm.weight          (d,)
    final_norm.bias            (d,)                    layernorm only
    layers.{l}.attn_norm.*     as final_norm
    layers.{l}.attn.q|k|v      (H, d_head, d)          row k of v[j] is attention subkey k
    layers.{l}.attn.o          (H, d, d_head)          column k of o[j] is attention subvalue k
    layers.{l}.attn.q_bias|k_bias|v_bias  (H, d_head)  use_bias only
    layers.{l}.attn.o_bias     (d,)                    use_bias only
    layers.{l}.ffn_norm.*      as final_norm
    layers.{l}.ffn.fc1         (N, d)                  row k is FFN subkey k (up projection)
    layers.{l}.ffn.gate        (N, d)                  gated only
    layers.{l}.ffn.fc2         (d, N)                  column k is FFN subvalue k
    layers.{l}.ffn.fc1_bias    (N,)                    use_bias only
    layers.{l}.ffn.fc2_bias    (d,)                    use_bias only

The container is the safetensors layout: an 8-byte little-endian header length,
a JSON header mapping names to dtype/shape/byte offsets, then the raw payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import ModelConfig, NeuronId


class WeightsError(ValueError):
    pass


_DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "F64": np.dtype("<f8"),
    "BF16": np.dtype("<u2"),
}


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    d, H, dh, N = c.d_model, c.n_heads, c.d_head, c.d_ffn
    layernorm = c.norm_family == "pre-layernorm"
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (c.vocab_size, d),
        "unembedding": (c.vocab_size, d),
        "final_norm.weight": (d,),
    }
    if c.position_family == "learned-absolute":
        shapes["pos_embedding"] = (c.context_length, d)
    if layernorm:
        shapes["final_norm.bias"] = (d,)
    for l in range(c.n_layers):
        p = f"layers.{l}."
        for norm in ("attn_norm", "ffn_norm"):
            shapes[p + norm + ".weight"] = (d,)
            if layernorm:
                shapes[p + norm + ".bias"] = (d,)
        for name in ("q", "k", "v"):
            shapes[p + "attn." + name] = (H, dh, d)
        shapes[p + "attn.o"] = (H, d, dh)
        shapes[p + "ffn.fc1"] = (N, d)
        shapes[p + "ffn.fc2"] = (d, N)
        if c.gated:
            shapes[p + "ffn.gate"] = (N, d)
        if c.use_bias:
            for name in ("q", "k", "v"):
                shapes[p + f"attn.{name}_bias"] = (H, dh)
            shapes[p + "attn.o_bias"] = (d,)
            shapes[p + "ffn.fc1_bias"] = (N,)
            shapes[p + "ffn.fc2_bias"] = (d,)
    return shapes


@dataclass
class TransformerWeights:
    """All model parameters keyed by layout name.

    Treat instances as immutable; editing functions return modified copies.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        validate(self.config, self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def get(self, name: str) -> np.ndarray | None:
        return self.tensors.get(name)

    def layer(self, l: int, name: str) -> np.ndarray | None:
        return self.tensors.get(f"layers.{l}.{name}")

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, **updates: np.ndarray) -> "TransformerWeights":
        """Copy with some tensors swapped out; untouched tensors are shared, not copied."""
        tensors = dict(self.tensors)
        for k, v in updates.items():
            tensors[k] = v
        return TransformerWeights(self.config, tensors)

    def hash(self) -> str:
        return model_hash(self)


def validate(config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise WeightsError(f"missing tensor {name!r}")
        t = tensors[name]
        if tuple(t.shape) != shape:
            raise WeightsError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {shape}")
        if t.dtype != np.float32:
            raise WeightsError(f"tensor {name!r} has dtype {t.dtype}, expected float32")
    extra = sorted(set(tensors) - set(shapes))
    if extra:
        raise WeightsError(f"unexpected tensor {extra[0]!r} for this config")


def model_hash(weights: TransformerWeights) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(weights.config.to_dict(), sort_keys=True).encode())
    for name in sorted(weights.tensors):
        t = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(repr(t.shape).encode())
        h.update(t.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# container I/O


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read every tensor of a safetensors file, upcast to fp32."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise WeightsError(f"{path}: truncated container")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsError(f"{path}: bad header: {e}") from e
    metadata = header.pop("__metadata__", {}) or {}
    payload = memoryview(data)[8 + n :]
    tensors = {}
    for name, info in header.items():
        dtype = info.get("dtype")
        if dtype not in _DTYPES:
            raise WeightsError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        start, end = info["data_offsets"]
        shape = tuple(info["shape"])
        raw = np.frombuffer(payload[start:end], dtype=_DTYPES[dtype])
        if raw.size != int(np.prod(shape, dtype=np.int64)):
            raise WeightsError(f"tensor {name!r}: payload size does not match shape {shape}")
        if dtype == "BF16":
            arr = (raw.astype(np.uint32) << 16).view(np.float32)
        else:
            arr = raw.astype(np.float32)
        tensors[name] = arr.reshape(shape)
    return tensors, metadata


def write_container(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {k: str(v) for k, v in metadata.items()}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        offset += len(blob)
        blobs.append(blob)
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    head += b" " * (-len(head) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load_weights(path, config: ModelConfig | None = None) -> TransformerWeights:
    """Load a weight container. Without ``config``, the one embedded by
    :func:`export_weights` is used."""
    tensors, metadata = read_container(path)
    if config is None:
        if "config" not in metadata:
            raise WeightsError(f"{path}: no embedded config; pass one explicitly")
        config = ModelConfig.from_dict(json.loads(metadata["config"]))
    return TransformerWeights(config, tensors)


def export_weights(weights: TransformerWeights, path) -> None:
    write_container(path, weights.tensors, {"format": "neuronedit", "config": json.dumps(weights.config.to_dict(), sort_keys=True)})


# ---------------------------------------------------------------------------
# construction


def random_model(config: ModelConfig, seed: int) -> TransformerWeights:
    """Gaussian weights with std 1/sqrt(d_model); unit norm gains, zero norm biases."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm.weight"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith("norm.bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return TransformerWeights(config, tensors)


class NeuronVectors(NamedTuple):
    """Subkey (1-D; for gated FFNs a (2, d) stack of up and gate rows) and subvalue."""

    subkey: np.ndarray
    subvalue: np.ndarray


def get_neuron(weights: TransformerWeights, nid: NeuronId) -> NeuronVectors:
    nid.check_bounds(weights.config)
    if nid.kind == "ffn":
        up = weights.layer(nid.layer, "ffn.fc1")[nid.index]
        sub = weights.layer(nid.layer, "ffn.fc2")[:, nid.index]
        if weights.config.gated:
            up = np.stack([up, weights.layer(nid.layer, "ffn.gate")[nid.index]])
        return NeuronVectors(up.copy(), sub.copy())
    v = weights.layer(nid.layer, "attn.v")[nid.head, nid.index]
    o = weights.layer(nid.layer, "attn.o")[nid.head, :, nid.index]
    return NeuronVectors(v.copy(), o.copy())


# ---------------------------------------------------------------------------
# Hugging Face checkpoint layouts


def config_from_hf(hf: dict, context_length: int | None = None) -> ModelConfig:
    """Build a ModelConfig from a GPT-2 or Llama ``config.json`` dict."""
    mt = hf.get("model_type")
    if mt == "gpt2":
        d = hf["n_embd"]
        return ModelConfig(
            n_layers=hf["n_layer"], d_model=d, n_heads=hf["n_head"], d_head=d // hf["n_head"],
            d_ffn=hf.get("n_inner") or 4 * d, vocab_size=hf["vocab_size"],
            ffn_family="single-gate", norm_family="pre-layernorm",
            position_family="learned-absolute", bos_token_id=hf.get("bos_token_id", 50256),
            context_length=context_length or hf["n_positions"],
            activation="gelu_new" if hf.get("activation_function", "gelu_new") == "gelu_new" else "gelu",
            norm_eps=hf.get("layer_norm_epsilon", 1e-5), use_bias=True,
        )
    if mt == "llama":
        d, H = hf["hidden_size"], hf["num_attention_heads"]
        if hf.get("num_key_value_heads", H) != H:
            raise WeightsError("grouped-query attention is not supported")
        return ModelConfig(
            n_layers=hf["num_hidden_layers"], d_model=d, n_heads=H,
            d_head=hf.get("head_dim") or d // H, d_ffn=hf["intermediate_size"],
            vocab_size=hf["vocab_size"], ffn_family="gated", norm_family="pre-rmsnorm",
            position_family="rotary", bos_token_id=hf.get("bos_token_id", 1),
            context_length=context_length or hf.get("max_position_embeddings", 2048),
            activation="silu", norm_eps=hf.get("rms_norm_eps", 1e-6), use_bias=False,
            rope_theta=float(hf.get("rope_theta", 10000.0)),
        )
    raise WeightsError(f"unsupported model_type {mt!r}")


def from_hf_state_dict(state: dict[str, np.ndarray], config: ModelConfig) -> TransformerWeights:
    """Convert a GPT-2 or Llama state dict (numpy arrays) into this layout."""
    f32 = lambda a: np.ascontiguousarray(np.asarray(a, dtype=np.float32))  # noqa: E731
    c = config
    d, H, dh = c.d_model, c.n_heads, c.d_head
    out: dict[str, np.ndarray] = {}
    if any(k.endswith("attn.c_attn.weight") for k in state):
        s = {k.removeprefix("transformer."): v for k, v in state.items()}
        out["embedding"] = f32(s["wte.weight"])
        out["unembedding"] = f32(s.get("lm_head.weight", s["wte.weight"]))
        out["pos_embedding"] = f32(s["wpe.weight"])[: c.context_length]
        out["final_norm.weight"] = f32(s["ln_f.weight"])
        out["final_norm.bias"] = f32(s["ln_f.bias"])
        for l in range(c.n_layers):
            p, q = f"h.{l}.", f"layers.{l}."
            out[q + "attn_norm.weight"] = f32(s[p + "ln_1.weight"])
            out[q + "attn_norm.bias"] = f32(s[p + "ln_1.bias"])
            out[q + "ffn_norm.weight"] = f32(s[p + "ln_2.weight"])
            out[q + "ffn_norm.bias"] = f32(s[p + "ln_2.bias"])
            w = f32(s[p + "attn.c_attn.weight"]).T  # (3d, d)
            b = f32(s[p + "attn.c_attn.bias"])
            for i, name in enumerate("qkv"):
                out[q + f"attn.{name}"] = f32(w[i * d : (i + 1) * d].reshape(H, dh, d))
                out[q + f"attn.{name}_bias"] = f32(b[i * d : (i + 1) * d].reshape(H, dh))
            wo = f32(s[p + "attn.c_proj.weight"]).T  # (d_out, d_in)
            out[q + "attn.o"] = f32(wo.reshape(d, H, dh).transpose(1, 0, 2))
            out[q + "attn.o_bias"] = f32(s[p + "attn.c_proj.bias"])
            out[q + "ffn.fc1"] = f32(f32(s[p + "mlp.c_fc.weight"]).T)
            out[q + "ffn.fc1_bias"] = f32(s[p + "mlp.c_fc.bias"])
            out[q + "ffn.fc2"] = f32(f32(s[p + "mlp.c_proj.weight"]).T)
            out[q + "ffn.fc2_bias"] = f32(s[p + "mlp.c_proj.bias"])
        return TransformerWeights(c, out)
    if "model.embed_tokens.weight" in state:
        s = state
        out["embedding"] = f32(s["model.embed_tokens.weight"])
        out["unembedding"] = f32(s.get("lm_head.weight", s["model.embed_tokens.weight"]))
        out["final_norm.weight"] = f32(s["model.norm.weight"])
        for l in range(c.n_layers):
            p, q = f"model.layers.{l}.", f"layers.{l}."
            out[q + "attn_norm.weight"] = f32(s[p + "input_layernorm.weight"])
            out[q + "ffn_norm.weight"] = f32(s[p + "post_attention_layernorm.weight"])
            for name in "qkv":
                out[q + f"attn.{name}"] = f32(f32(s[p + f"self_attn.{name}_proj.weight"]).reshape(H, dh, d))
            wo = f32(s[p + "self_attn.o_proj.weight"])
            out[q + "attn.o"] = f32(wo.reshape(d, H, dh).transpose(1, 0, 2))
            out[q + "ffn.fc1"] = f32(s[p + "mlp.up_proj.weight"])
            out[q + "ffn.gate"] = f32(s[p + "mlp.gate_proj.weight"])
            out[q + "ffn.fc2"] = f32(s[p + "mlp.down_proj.weight"])
        return TransformerWeights(c, out)
    raise WeightsError("state dict matches neither the GPT-2 nor the Llama layout")


def import_hf_checkpoint(model_dir) -> TransformerWeights:
    """Read ``config.json`` plus ``model.safetensors`` from a Hugging Face model directory."""
    model_dir = Path(model_dir)
    config = config_from_hf(json.loads((model_dir / "config.json").read_text()))
    state, _ = read_container(model_dir / "model.safetensors")
    return from_hf_state_dict(state, config)
