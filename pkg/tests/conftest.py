from __future__ import annotations

import numpy as np
import pytest

from fsrl.adapter import SteeringAdapter
from fsrl.data import DataSpec, gen_preference_data
from fsrl.lm import FrozenLM, LMConfig, init_params
from fsrl.sae import SparseAutoencoder

TINY = LMConfig(d_model=8, n_layers=2, n_heads=2, d_mlp=16, context_len=16, hook_layer=1)
TINY_SPEC = DataSpec(letters="abcdef", min_len=2, max_len=3)


def tiny_model(seed: int = 0, trainable: bool = False) -> FrozenLM:
    rng = np.random.default_rng(seed)
    params = {k: v + rng.normal(scale=0.2, size=v.shape) for k, v in init_params(TINY, rng).items()}
    return FrozenLM(TINY, params, trainable=trainable)


def tiny_sae(seed: int = 0, d_sae: int = 24, trainable: bool = False) -> SparseAutoencoder:
    rng = np.random.default_rng(seed)
    sae = SparseAutoencoder.random(TINY.d_model, d_sae, rng, b_dec=rng.normal(size=TINY.d_model), trainable=trainable)
    return sae


def tiny_adapter(seed: int = 0, d_sae: int = 24, variant: str = "soft_threshold") -> SteeringAdapter:
    rng = np.random.default_rng(seed)
    return SteeringAdapter(
        rng.normal(size=(d_sae, TINY.d_model)) / np.sqrt(TINY.d_model),
        rng.normal(scale=0.1, size=d_sae),
        rng.uniform(0.0, 0.5, size=d_sae),
        variant,
    )


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def sae():
    return tiny_sae()


@pytest.fixture
def adapter():
    return tiny_adapter()


@pytest.fixture
def triplets():
    return gen_preference_data(0, 12, TINY_SPEC)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
