import pytest
from conftest import tiny_config
from hypothesis import given
from hypothesis import strategies as st

from neuronedit.config import ConfigError, ModelConfig, NeuronId, all_neurons


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(ffn_family="gated", position_family="rotary", activation="silu")
    cfg.save(tmp_path / "c.json")
    assert ModelConfig.from_json(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("bad", [
    dict(d_model=15),
    dict(ffn_family="moe"),
    dict(norm_family="post-layernorm"),
    dict(position_family="alibi"),
    dict(activation="tanh"),
    dict(n_layers=0),
    dict(bos_token_id=50),
    dict(position_family="rotary", n_heads=16, d_head=1),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad)


def test_unknown_config_field():
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**tiny_config().to_dict(), "n_experts": 8})


@given(st.integers(0, 99), st.integers(0, 15), st.integers(0, 9999), st.booleans())
def test_neuron_id_text_round_trip(layer, head, index, attn):
    nid = NeuronId.attn(layer, head, index) if attn else NeuronId.ffn(layer, index)
    assert NeuronId.parse(str(nid)) == nid
    assert NeuronId.from_dict(nid.to_dict()) == nid


def test_neuron_id_formats():
    assert str(NeuronId.ffn(20, 3114)) == "ffn:L20:N3114"
    assert str(NeuronId.attn(18, 7, 56)) == "attn:L18H7:N56"
    for bad in ["ffn:L1", "attn:L1:N2", "mlp:L1:N2", "ffn:L-1:N2"]:
        with pytest.raises(ValueError):
            NeuronId.parse(bad)
    with pytest.raises(ValueError):
        NeuronId("attn", 0, 1)
    with pytest.raises(ValueError):
        NeuronId("ffn", 0, 1, head=0)


def test_canonical_order():
    ids = [NeuronId.attn(0, 1, 0), NeuronId.ffn(1, 0), NeuronId.attn(0, 0, 5), NeuronId.ffn(0, 9)]
    assert sorted(ids) == [NeuronId.ffn(0, 9), NeuronId.attn(0, 0, 5), NeuronId.attn(0, 1, 0), NeuronId.ffn(1, 0)]
    cfg = tiny_config()
    everything = all_neurons(cfg)
    assert everything == sorted(everything)
    assert len(everything) == cfg.n_layers * (cfg.d_ffn + cfg.n_heads * cfg.d_head)
    assert len(all_neurons(cfg, "attn")) == cfg.n_layers * cfg.d_model


def test_bounds():
    cfg = tiny_config()
    NeuronId.ffn(1, 31).check_bounds(cfg)
    for nid in [NeuronId.ffn(2, 0), NeuronId.ffn(0, 32), NeuronId.attn(0, 2, 0), NeuronId.attn(0, 0, 8)]:
        with pytest.raises(IndexError):
            nid.check_bounds(cfg)
