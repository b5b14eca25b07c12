import pytest
import torch

from model.model import DTYPE, Network

from network_factories import random_network, random_signs


@pytest.fixture
def make_net():
    return random_network


@pytest.fixture
def make_signs():
    return random_signs


@pytest.fixture
def ferromagnet():
    """Six nodes, every coupling 1, no biases: two symmetric modes."""
    n = 6
    return Network.fully_connected(torch.ones(n, n, dtype=DTYPE) - torch.eye(n, dtype=DTYPE), torch.zeros(n))
