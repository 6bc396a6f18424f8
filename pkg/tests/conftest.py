import numpy as np
import pytest

from reactortwin.network import NeuralNetModel, Normalization
from reactortwin.plant import PlantConfig, steady_state
from reactortwin.episodes import reference_scenario


@pytest.fixture(scope="session")
def cfg():
    return PlantConfig()


@pytest.fixture(scope="session")
def steady(cfg):
    return steady_state(cfg)


@pytest.fixture(scope="session")
def ref_spec():
    return reference_scenario()


def constant_model(value: float, n_in: int = 3) -> NeuralNetModel:
    """Net that outputs `value` for any input (zero weights, output bias)."""
    m = NeuralNetModel.init([n_in, 2, 1], seed=0)
    m.weights = [np.zeros((2, n_in)), np.zeros((1, 2))]
    m.biases = [np.zeros(2), np.array([value])]
    m.norm = Normalization.identity(n_in, 1)
    return m


def first_channel_model(eps: float = 1e-7) -> NeuralNetModel:
    """Net computing ~x[0] via the near-linear region of tanh."""
    m = NeuralNetModel.init([3, 1, 1], seed=0)
    m.weights = [np.array([[eps, 0.0, 0.0]]), np.array([[1.0 / eps]])]
    m.biases = [np.zeros(1), np.zeros(1)]
    m.norm = Normalization.identity(3, 1)
    return m
