"""Pytest configuration and fixtures."""

import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Keep log files and default config lookups out of the user's home
_XDG_ROOT = Path(tempfile.mkdtemp(prefix="msodom-tests-"))
os.environ["XDG_DATA_HOME"] = str(_XDG_ROOT / "data")
os.environ["XDG_CONFIG_HOME"] = str(_XDG_ROOT / "config")

from core.imu import ImuNoise  # noqa: E402
from core.manifold import Pose, Rotation, so3_exp  # noqa: E402
from core.sim import EUROC_NOISE, make_scenario, simulation_rig  # noqa: E402


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path, ignore_errors=True)


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(12345)


@pytest.fixture
def rig():
    """640x480 stereo pair with a 0.2 m baseline, looking along body +y."""
    return simulation_rig()


@pytest.fixture
def noise():
    return EUROC_NOISE


@pytest.fixture
def zero_noise():
    return ImuNoise(0.0, 0.0, 0.0, 0.0)


@pytest.fixture(scope="session")
def circle_scenario():
    """Noise-free circle, short enough for unit tests."""
    return make_scenario("circle", seed=0, frames=60)


@pytest.fixture(scope="session")
def static_scenario():
    return make_scenario("static", seed=0, frames=20)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> Rotation:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, max_offset: float = 1.0) -> Pose:
    return Pose(random_rotation(rng, max_angle), rng.uniform(-max_offset, max_offset, 3))
