import numpy as np
import pytest

from objslam.geometry import RigidTransform


def random_rigid(rng) -> RigidTransform:
    """Uniformly random rotation (via normalized quaternion) plus a bounded
    translation; used by many oracle tests."""
    q = rng.standard_normal(4)
    q = q / np.linalg.norm(q)
    t = rng.uniform(-5.0, 5.0, 3)
    return RigidTransform(q, t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
