import numpy as np
import pytest
import torch

from dosediff.phantom import desk_spec, generate_phantom


@pytest.fixture(scope="session")
def lung_case():
    return generate_phantom(desk_spec("lung", 3))


@pytest.fixture(scope="session")
def hn_case():
    return generate_phantom(desk_spec("head-neck", 5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
