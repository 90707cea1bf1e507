import numpy as np
import pytest
import torch

from p2g.backbone import BackboneConfig, MaskedLM, Vocabulary
from p2g.data import GeneratorConfig, generate_corpus
from p2g.model import AblationFlags, ModelConfig, P2GModel

SMALL_GEN = GeneratorConfig(scenario_count=3, vocab_per_scenario=16, chain_length=3,
                            candidate_count=4, instance_count=120, seed=5)
SMALL_BACKBONE = BackboneConfig(hidden_size=16, layer_count=1, head_count=2, feed_forward_size=32,
                                max_sequence_length=32)


def fd_grad(f, x: torch.Tensor, index, h: float = 1e-4) -> float:
    """Central difference of scalar ``f()`` in the entry ``x[index]`` (modified in place)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        up = float(f())
        x[index] = orig - h
        down = float(f())
        x[index] = orig
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_GEN)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return Vocabulary.from_corpus(small_corpus)


@pytest.fixture
def make_model(small_vocab):
    def _make(flags=(), dtype=torch.float32, seed=0, **model_kw):
        torch.manual_seed(seed)
        backbone = MaskedLM(SMALL_BACKBONE, len(small_vocab))
        model = P2GModel(backbone, small_vocab, ModelConfig(**model_kw), AblationFlags.from_names(flags))
        model.eval()
        return model.to(dtype)
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
