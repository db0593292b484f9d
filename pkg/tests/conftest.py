import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_tensor(shape, seed=0, dtype=np.float32):
    from amygseg.tensor import Tensor

    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))
