"""Model configuration and neuron addressing."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

FFN_FAMILIES = ("single-gate", "gated")
NORM_FAMILIES = ("pre-layernorm", "pre-rmsnorm")
POSITION_FAMILIES = ("learned-absolute", "rotary")
ACTIVATIONS = ("gelu_new", "gelu", "relu", "silu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ffn: int
    vocab_size: int
    ffn_family: str = "single-gate"
    norm_family: str = "pre-layernorm"
    position_family: str = "learned-absolute"
    bos_token_id: int = 0
    context_length: int = 1024
    activation: str = "gelu_new"
    norm_eps: float = 1e-5
    use_bias: bool = False
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ffn", "context_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) * d_head ({self.d_head})"
            )
        if self.ffn_family not in FFN_FAMILIES:
            raise ConfigError(f"unknown ffn_family {self.ffn_family!r}")
        if self.norm_family not in NORM_FAMILIES:
            raise ConfigError(f"unknown norm_family {self.norm_family!r}")
        if self.position_family not in POSITION_FAMILIES:
            raise ConfigError(f"unknown position_family {self.position_family!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.position_family == "rotary" and self.d_head % 2:
            raise ConfigError("rotary positions need an even d_head")
        if not 0 <= self.bos_token_id < self.vocab_size:
            raise ConfigError(f"bos_token_id {self.bos_token_id} outside vocabulary")

    @property
    def gated(self) -> bool:
        return self.ffn_family == "gated"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_ID_RE = re.compile(r"^(ffn):L(\d+):N(\d+)$|^(attn):L(\d+)H(\d+):N(\d+)$")


@dataclass(frozen=True)
class NeuronId:
    """Address of one FFN neuron (layer, index) or attention neuron (layer, head, index).

    The string form is ``ffn:L20:N3114`` or ``attn:L18H7:N56``.
    """

    kind: str
    layer: int
    index: int
    head: int | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("ffn", "attn"):
            raise ValueError(f"neuron kind must be 'ffn' or 'attn', got {self.kind!r}")
        if self.kind == "attn" and self.head is None:
            raise ValueError("attention neurons need a head index")
        if self.kind == "ffn" and self.head is not None:
            raise ValueError("FFN neurons have no head index")

    @classmethod
    def ffn(cls, layer: int, index: int) -> "NeuronId":
        return cls("ffn", int(layer), int(index))

    @classmethod
    def attn(cls, layer: int, head: int, index: int) -> "NeuronId":
        return cls("attn", int(layer), int(index), int(head))

    @classmethod
    def parse(cls, text: str) -> "NeuronId":
        m = _ID_RE.match(text.strip())
        if not m:
            raise ValueError(f"cannot parse neuron id {text!r}")
        if m.group(1):
            return cls.ffn(int(m.group(2)), int(m.group(3)))
        return cls.attn(int(m.group(5)), int(m.group(6)), int(m.group(7)))

    def __str__(self) -> str:
        if self.kind == "ffn":
            return f"ffn:L{self.layer}:N{self.index}"
        return f"attn:L{self.layer}H{self.head}:N{self.index}"

    def sort_key(self) -> tuple[int, int, int, int]:
        # layer first, FFN before attention within a layer
        return (self.layer, 0 if self.kind == "ffn" else 1, self.head or 0, self.index)

    def __lt__(self, other: "NeuronId") -> bool:
        return self.sort_key() < other.sort_key()

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "layer": self.layer, "index": self.index}
        if self.head is not None:
            d["head"] = self.head
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronId":
        return cls(d["kind"], int(d["layer"]), int(d["index"]), d.get("head"))

    def check_bounds(self, config: ModelConfig) -> None:
        if not 0 <= self.layer < config.n_layers:
            raise IndexError(f"{self}: layer out of range [0, {config.n_layers})")
        if self.kind == "ffn":
            if not 0 <= self.index < config.d_ffn:
                raise IndexError(f"{self}: index out of range [0, {config.d_ffn})")
        else:
            if not 0 <= self.head < config.n_heads:
                raise IndexError(f"{self}: head out of range [0, {config.n_heads})")
            if not 0 <= self.index < config.d_head:
                raise IndexError(f"{self}: index out of range [0, {config.d_head})")


def all_neurons(config: ModelConfig, kind: str | None = None) -> list[NeuronId]:
    """Every neuron of the model in canonical order."""
    out = []
    for layer in range(config.n_layers):
        if kind in (None, "ffn"):
            out.extend(NeuronId.ffn(layer, k) for k in range(config.d_ffn))
        if kind in (None, "attn"):
            out.extend(
                NeuronId.attn(layer, j, k)
                for j in range(config.n_heads)
                for k in range(config.d_head)
            )
    return out
