import pytest
import torch

from apgcl.numerics import precision


@pytest.fixture
def f64():
    with precision(64):
        yield torch.float64


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
