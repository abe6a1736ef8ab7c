import numpy as np
import pytest
from hypothesis import settings

from soma import body as bodymod

settings.register_profile("soma", deadline=None, max_examples=40)
settings.load_profile("soma")


@pytest.fixture(scope="session")
def body():
    return bodymod.build_body()


@pytest.fixture(scope="session")
def layout(body):
    return bodymod.make_layout(body, bodymod.DESK12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
