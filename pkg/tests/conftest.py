import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def identity_camera(size=32, f=30.0, near=0.01):
    from hfsplat.core import Camera
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size,
                  np.hstack([np.eye(3), np.zeros((3, 1))]), near)


def random_scene(seed, n=20, size=32, feature_dim=8, f=30.0):
    """Random Gaussians in front of an identity camera."""
    from hfsplat.core import GaussianSet, logit
    rng = np.random.default_rng(seed)
    cam = identity_camera(size, f)
    z = rng.uniform(3.0, 8.0, n)
    uv = rng.uniform(-4, size + 4, (n, 2))
    pos = np.stack([(uv[:, 0] - cam.cx) * z / f, (uv[:, 1] - cam.cy) * z / f, z], axis=1)
    gs = GaussianSet(position=pos, rotation=rng.normal(size=(n, 4)),
                     scale=np.log(rng.uniform(0.05, 0.6, (n, 3))),
                     opacity=logit(rng.uniform(0.05, 0.999, n)),
                     color=rng.normal(size=(n, 3)), feature=rng.normal(size=(n, feature_dim)))
    return gs, cam


@pytest.fixture
def scene():
    return random_scene(0)
