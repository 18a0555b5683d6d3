import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import diff_engine as de  # noqa: E402
from oracle_planner import DatasetRecord  # noqa: E402
from pastel_model import ModelConfig, PastelModel  # noqa: E402
from planar_env import State, default_environment, simulate  # noqa: E402
from stl_core import linearize, parse, robustness  # noqa: E402

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
GOLDEN_DIR = os.path.join(os.path.dirname(__file__), 'golden')


@pytest.fixture(autouse=True)
def float64_mode():
    """Every test runs in 64-bit mode; the previous dtype is restored afterwards"""
    previous = de.get_default_dtype()
    de.set_default_dtype('float64')
    yield
    de.set_default_dtype(previous)


@pytest.fixture
def in_repo_root(monkeypatch):
    """Run with the repository root as working directory so relative config paths resolve"""
    monkeypatch.chdir(REPO_ROOT)
    return REPO_ROOT


@pytest.fixture
def env():
    return default_environment()


@pytest.fixture
def tiny_model_config(env):
    """Smallest architecture that still exercises every component"""
    return ModelConfig.for_environment(env, d_model=8, n_heads=2, n_layers=1, d_tok=4, ff_mult=2,
                                       h_max=32, dropout=0.0, seed=0)


@pytest.fixture
def tiny_model(tiny_model_config):
    return PastelModel(tiny_model_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def golden_path():
    def _path(name):
        return os.path.join(GOLDEN_DIR, name)
    return _path


REGION_SPECS = {'reach_r1': ('F[0,3](R1)', (7.0, 7.0)), 'reach_r2': ('F[0,3](R2)', (2.0, 7.0))}


@pytest.fixture
def region_records(env):
    """Twelve verified records: short reach tasks that start inside their goal region"""
    rng = np.random.default_rng(7)
    records = []
    for spec_id, (text, (cx, cy)) in REGION_SPECS.items():
        f = parse(text)
        for index in range(6):
            x0 = State(cx + rng.uniform(-0.4, 0.4), cy + rng.uniform(-0.4, 0.4), 0.0, 0.0)
            actions = rng.uniform(-0.2, 0.2, size=(3, 2))
            states = simulate(x0, actions, env)
            records.append(DatasetRecord(spec_id=spec_id, tokens=linearize(f), states=states, actions=actions,
                                         rho=robustness(f, states, 0, env), seed=index))
    return records
