import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.models import BoundaryData, PhysicalConstants, build_layer_stack
from src.services.basis_cache import BasisCache
from src.services.darcy_transport import DarcyTransport, StepperConfig
from src.services.mode_pool import ModePool
from src.services.spectral_fields import build_spectral_basis


@pytest.fixture
def single_stack():
    return build_layer_stack([0.0, -1.0], [(1.0, 1.0, 1.0)], 1.0)


@pytest.fixture
def two_layer_stack():
    """Equal halves, bottom layer twice as diffusive"""
    return build_layer_stack([0.0, -0.5, -1.0], [(1.0, 1.0, 1.0), (1.0, 1.0, 2.0)], 1.0)


@pytest.fixture
def contrast_stack():
    return build_layer_stack([0.0, -0.3, -0.7, -1.0], [(1.0, 1.0, 1.0), (5.0, 1.0, 10.0), (0.5, 1.0, 2.0)], 2.0)


@pytest.fixture
def pool():
    pool = ModePool(workers=2)
    yield pool
    pool.shutdown()


@pytest.fixture
def small_bases(two_layer_stack, pool):
    return build_spectral_basis(two_layer_stack, 8, 6, pool=pool, cache=BasisCache())


@pytest.fixture
def make_transport(pool):
    def build(bases, C0=0.0, C1=0.0, dt=1e-3, scheme='IMEX-CN', alpha=1.0):
        return DarcyTransport(bases, PhysicalConstants(alpha=alpha), BoundaryData(C0, C1),
                              StepperConfig(dt=dt, scheme=scheme), pool=pool)
    return build
