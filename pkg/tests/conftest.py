"""
Shared fixtures: the tiny configuration, seeded generators and small scenes.
"""
import numpy as np
import pytest

from pip_motion.config import Config, tiny_config
from pip_motion.interactor import QueryBundle
from pip_motion.models import GenConfig
from pip_motion.params import ModelParams
from pip_motion.synthgen import generate_scene
from pip_motion.tensor import constant


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(42)


@pytest.fixture
def config() -> Config:
    """N_P=4, N_mode=2, C=8, heads=2, T_f=3."""
    return tiny_config()


@pytest.fixture
def params(config) -> ModelParams:
    return ModelParams.init(config, seed=0)


@pytest.fixture
def oracle_gen() -> GenConfig:
    """Generator whose agents all keep complete futures."""
    return GenConfig(seed=7, exit_fraction=0.0)


@pytest.fixture
def tiny_gen() -> GenConfig:
    return GenConfig(seed=3, lanes_per_scene=2, crossings_per_scene=1, geometry="straight",
                     agents_per_scene=3, static_fraction=0.0, pedestrian_fraction=0.0, exit_fraction=0.0)


@pytest.fixture
def tiny_scene(tiny_gen, config):
    return generate_scene(tiny_gen, 0, config)


def random_bundle(rng: np.random.Generator, config: Config, n_agents: int = 3, n_instances: int = 4,
                  spread: float = 30.0) -> QueryBundle:
    """Bundle with random features; coordinates are multiples of 1/64."""
    c, n_p = config.C, config.N_P
    positions = np.round(rng.uniform(-spread, spread, size=(n_agents, 2)) * 64) / 64
    points = np.round(rng.uniform(-spread, spread, size=(n_instances, n_p, 2)) * 64) / 64
    return QueryBundle(
        agent_queries=constant(rng.standard_normal((n_agents, c))),
        agent_positions=positions,
        map_queries=constant(rng.standard_normal((n_instances, n_p, c))),
        map_points=points,
        map_scores=rng.uniform(0.0, 1.0, size=(n_instances, config.n_map_classes)),
    )


@pytest.fixture
def bundle(rng, config) -> QueryBundle:
    return random_bundle(rng, config)
