import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuronedit.config import ModelConfig  # noqa: E402
from neuronedit.datasets import generate_commonwords, sample_wordlists  # noqa: E402
from neuronedit.synthetic import DESK_GENDERS, desk_tokenizer, marker_probe, planted_bias_model  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, d_model=16, n_heads=2, d_head=8, d_ffn=32, vocab_size=50,
                ffn_family="single-gate", norm_family="pre-layernorm", position_family="learned-absolute",
                context_length=32)
    base.update(kw)
    return ModelConfig(**base)


FAMILIES = [
    dict(),
    dict(ffn_family="gated", norm_family="pre-rmsnorm", position_family="rotary", activation="silu"),
    dict(use_bias=True, activation="gelu"),
    dict(norm_family="pre-rmsnorm", activation="relu"),
]


def reference_config(cfg: ModelConfig) -> dict:
    return dict(cfg.to_dict())


@pytest.fixture(scope="session")
def tok():
    return desk_tokenizer()


@pytest.fixture(scope="session")
def desk_pairs():
    return generate_commonwords(sample_wordlists(), DESK_GENDERS)


@pytest.fixture(scope="session")
def planted(tok):
    return planted_bias_model(tok)


@pytest.fixture(scope="session")
def probe():
    return marker_probe(100, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion
_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"{_criteria[name]}  {name}")
