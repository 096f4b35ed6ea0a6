import numpy as np
import pytest

from kinefit import skeleton


@pytest.fixture(scope="session")
def defn():
    return skeleton.load_default_model()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_pose(defn, rng, margin=0.15):
    """A pose with every rotational coordinate strictly inside its limits."""
    lo, hi = defn.limits_lo, defn.limits_hi
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    pose = mid + (1 - margin) * half * rng.uniform(-1, 1, size=lo.shape)
    pose[:3] = rng.uniform(-1, 1, size=3)
    pose[3:6] = rng.uniform(-1.5, 1.5, size=3)
    return pose
