import numpy as np
import pytest
import torch

from core.data_model import ModelConfig
from core.model import MVPFormer


@pytest.fixture(scope="module")
def toy_model():
    """
    Modelo toy en doble precisión, con los pesos fijados por la semilla 0.
    """
    torch.manual_seed(0)
    return MVPFormer(ModelConfig()).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
