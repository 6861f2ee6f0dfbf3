"""
Shared pytest fixtures
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.control import tune  # noqa: E402
from src.linmodel import linearize  # noqa: E402
from src.plant import PlantParams  # noqa: E402


@pytest.fixture
def p0():
    return PlantParams()


@pytest.fixture(scope="session")
def tuned():
    """TuningResult for the default plant and controller"""
    return tune(linearize(PlantParams()))


@pytest.fixture(scope="session")
def tuned_gains(tuned):
    return tuned.gains
