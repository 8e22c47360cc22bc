"""Shared fixtures: small models and instances sized for fast unit tests."""

import numpy as np
import pytest

from l2r.instances import generate_uniform
from l2r.neural_core import ModelConfig, ParameterSet


TINY = dict(d=8, d_ff=16, layers=2, k=5, gamma=0.1, xi=10.0)


@pytest.fixture
def tsp_config():
    return ModelConfig(kind="tsp", **TINY)


@pytest.fixture
def cvrp_config():
    return ModelConfig(kind="cvrp", **TINY)


@pytest.fixture
def tsp_pset(tsp_config):
    return ParameterSet.init(tsp_config, seed=7, dtype="float64")


@pytest.fixture
def cvrp_pset(cvrp_config):
    return ParameterSet.init(cvrp_config, seed=7, dtype="float64")


@pytest.fixture
def tsp10():
    return generate_uniform("tsp", 10, seed=3)


@pytest.fixture
def cvrp10():
    return generate_uniform("cvrp", 10, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
