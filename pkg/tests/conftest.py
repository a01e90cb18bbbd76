import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nvsdepth.geometry import CameraIntrinsics, RigidPose, rotation_from_axis_angle

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, max_angle=0.3, max_t=1.0) -> RigidPose:
    axis = rng.normal(size=3)
    return RigidPose(rotation_from_axis_angle(axis, rng.uniform(-max_angle, max_angle)),
                     rng.uniform(-max_t, max_t, 3))


def random_intrinsics(rng, w=None, h=None) -> CameraIntrinsics:
    w = w or int(rng.integers(8, 80))
    h = h or int(rng.integers(8, 80))
    return CameraIntrinsics(rng.uniform(20, 200), rng.uniform(20, 200),
                            rng.uniform(0, w - 1), rng.uniform(0, h - 1), w, h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
