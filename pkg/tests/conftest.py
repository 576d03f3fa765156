import numpy as np
import pytest

from ihalab import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def each_backend(request):
    with kernels.use_backend(request.param):
        yield request.param
