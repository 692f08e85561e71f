import numpy as np
import pytest

from countlab.dataset import counting_split
from countlab.model import ModelConfig, build_sequence, collate, config_for, init_params
from countlab.synth import CanvasSpec
from countlab.vocab import Vocab


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def small_spec():
    # 16 image tokens keeps micro-model tests fast
    return CanvasSpec(32, 8)


@pytest.fixture(scope="session")
def micro_cfg(vocab, small_spec):
    return config_for(vocab, small_spec, n_layers=2, n_heads=2, d_model=16, d_head=8, mlp_mult=2)


@pytest.fixture()
def micro_params(micro_cfg):
    return init_params(micro_cfg, seed=3)


@pytest.fixture(scope="session")
def micro_items(small_spec):
    return counting_split("syndot", range(1, 4), 2, small_spec, seed=5, radius_px=2.0)


@pytest.fixture()
def micro_batch(micro_items, micro_cfg, vocab):
    return collate([build_sequence(r, s, micro_cfg, vocab) for s, r in micro_items])


def random_params(cfg: ModelConfig, seed: int, scale: float = 1.0):
    """Parameters with larger spread than the default init so every path is exercised."""
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in p.items():
        p[k] = v + scale * 0.1 * rng.standard_normal(v.shape)
    return p


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
