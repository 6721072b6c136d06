"""Shared fixtures: a small scenario, a triangle network and toll profiles."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tcsim.config.settings import ScenarioConfig  # noqa: E402
from tcsim.core.market import TollProfile  # noqa: E402
from tcsim.core.network import RoadNetwork  # noqa: E402
from tcsim.core.optimizer import TollParams, toll_profile  # noqa: E402
from tcsim.core.scenario import build_scenario  # noqa: E402
from tcsim.core.types import NetworkDescription, Segment  # noqa: E402


def small_config_dict():
    return {
        'days': 3,
        'seed': 11,
        'population_size': 40,
        'learning': {'max_days': 3, 'stability_window': 2},
        'bo': {'iterations': 1, 'initial_design': 2, 'averaging_window': 2,
               'acquisition_samples': 256},
        'network': {'rows': 3, 'cols': 3},
    }


@pytest.fixture
def small_config():
    return ScenarioConfig.from_dict(small_config_dict())


@pytest.fixture
def small_scenario(small_config):
    return build_scenario(small_config)


def segment(id, a, b, length, vf=60.0, capacity=1800.0, kjam=150.0, **kwargs):
    return Segment(id=id, from_node=a, to_node=b, length=length, vf=vf, capacity=capacity,
                   kjam=kjam, **kwargs)


@pytest.fixture
def triangle():
    """Nodes 0, 1, 2; a 2.5 km highway 0->2 next to two 1 km arterials via 1."""
    segments = (
        segment(0, 0, 1, 1000.0, signal=True),
        segment(1, 1, 2, 1000.0, signal=True),
        segment(2, 0, 2, 2500.0, vf=100.0, lanes=2, highway=True),
        segment(3, 1, 0, 1000.0),
        segment(4, 2, 1, 1000.0),
        segment(5, 2, 0, 2500.0, vf=100.0, lanes=2, highway=True),
    )
    return RoadNetwork(NetworkDescription(nodes=(0, 1, 2), segments=segments))


@pytest.fixture
def zero_toll():
    return TollProfile.zeros()


@pytest.fixture
def peak_toll():
    """Morning-peak Gaussian toll."""
    return toll_profile(TollParams(amplitude=0.004, mean=480.0, std=45.0))
