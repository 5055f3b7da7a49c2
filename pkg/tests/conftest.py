import numpy as np
import pytest

from rtfgraph.config import ENV_OVERRIDES
from rtfgraph.room_sim import build_scene
from tests.toy import TOY_STFT, make_objective_example, toy_room, toy_scene_spec


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def toy_stft():
    return TOY_STFT


@pytest.fixture
def toy_scene():
    return build_scene(toy_scene_spec(), toy_room())


@pytest.fixture(scope="session")
def toy_example():
    return make_objective_example(seed=3)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """Run from an empty directory with no RTFGRAPH_* variables; .env writes are undone."""
    for var in list(ENV_OVERRIDES) + ["RTFGRAPH_LOG_LEVEL"]:
        monkeypatch.setenv(var, "")
        monkeypatch.delenv(var)
    monkeypatch.chdir(tmp_path)
    return tmp_path
