import numpy as np
import pytest

from ftrain.kernels import _autotune_cache
from ftrain.numerics import set_num_threads


@pytest.fixture(autouse=True)
def _clean_global_state():
    """Each test starts from one thread and an empty autotune cache."""
    set_num_threads(1)
    _autotune_cache.clear()
    yield
    set_num_threads(1)
    _autotune_cache.clear()


def rel_err(got, want, floor=1e-6):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), floor)))
