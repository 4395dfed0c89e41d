from pathlib import Path

import numpy as np
import pytest

from moyal.phasespace import MaterialParams, build_grid
from moyal.stencil import DEFAULT_MAX_ORDER, set_max_order


@pytest.fixture
def material():
    return MaterialParams()


@pytest.fixture
def small_grid():
    """6 x 8 grid at dx*dk = 0.2."""
    return build_grid(1e-9, 2e8, 6, 8)


@pytest.fixture
def unit_grid():
    """8 x 8 grid at dx*dk = 1, where the auto window is 1."""
    return build_grid(1e-9, 1e9, 8, 8)


@pytest.fixture
def configs_dir():
    return Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def restore_max_order():
    yield
    set_max_order(DEFAULT_MAX_ORDER)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
