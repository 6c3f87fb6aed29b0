import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vafocus.optics import OpticalConfig


@pytest.fixture(scope="session")
def cfg():
    return OpticalConfig()


@pytest.fixture(scope="session")
def small_cfg():
    # Small kernel keeps rendering cheap in unit tests.
    return OpticalConfig(kernel_radius_px=7)
