import numpy as np
import pytest
import torch

from app.services.geometry_service import ScannerGeometry


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow optimization/experiment tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def geom64():
    return ScannerGeometry(crystals_per_ring=64, num_rings=1)


@pytest.fixture
def geom16():
    """Small 2-ring scanner for fast simulation and binning checks."""
    return ScannerGeometry(radius_mm=100.0, crystals_per_ring=16, num_rings=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield
