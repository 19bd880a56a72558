import numpy as np
import pytest

from splatrig import SyntheticSpec, bind, make_synthetic_scene

FIXTURE_TEMPLATES = ("chain-2", "chain-3", "star-3", "pendulum")


@pytest.fixture(scope="session")
def pendulum16():
    """The pose-recovery fixture: one moving joint, 16 frames."""
    cloud, skeleton, poses = make_synthetic_scene(
        SyntheticSpec(template="pendulum", frame_count=16, splats_per_bone=60, seed=3))
    binding = bind(cloud, skeleton, k=2)
    return cloud, skeleton, poses, binding


@pytest.fixture(scope="session")
def pendulum8():
    """Smaller variant for gradient checks and quick fits."""
    cloud, skeleton, poses = make_synthetic_scene(
        SyntheticSpec(template="pendulum", frame_count=8, splats_per_bone=30, seed=5))
    binding = bind(cloud, skeleton, k=2)
    return cloud, skeleton, poses, binding


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
