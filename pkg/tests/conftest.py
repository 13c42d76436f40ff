import numpy as np
import pytest
import torch

from rmfnet.cryosim import VolumeGrid
from rmfnet.model import RMFN, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_model():
    """Small 2D network with integer frequencies."""
    return RMFN(ModelConfig(d_in=2, d_h=8, layers=2, b_max=16.0), rng=7)


@pytest.fixture
def field_model():
    """Small 3D network as used by reconstruction."""
    return RMFN(ModelConfig(d_in=3, d_h=8, layers=2, b_max=4.0, quantize=False), rng=11)


@pytest.fixture
def bordered_volume(rng):
    """Random 8^3 density with a two-voxel empty border."""
    values = np.zeros((8, 8, 8))
    values[2:-2, 2:-2, 2:-2] = rng.uniform(0.0, 1.0, (4, 4, 4))
    return VolumeGrid(values, voxel_size=1.0)


@pytest.fixture
def rz90():
    """Exact quarter turn about z."""
    return np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture(autouse=True)
def seed_torch():
    torch.manual_seed(0)
