import numpy as np
import pytest

from mfstack.model import table1_scenario


@pytest.fixture(scope="session")
def table1():
    params, settings = table1_scenario()
    return params


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240901)
