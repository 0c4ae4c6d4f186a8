import numpy as np
import pytest
from hypothesis import settings

from layersplat.scene import Camera, GaussianCloud, SurfelCloud, frame_from_normal, rotmat_to_quat

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def small_camera(size=16, fx=18.0):
    """Camera at the origin looking down +z (world z is the optical axis)."""
    return Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), up=(0.0, -1.0, 0.0), width=size, height=size, fx=fx)


def random_gaussians(rng, n, depth=(2.0, 4.0), spread=0.6, scale=(0.05, 0.3), opacity=(0.2, 0.8)):
    means = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(means, q, rng.uniform(*scale, (n, 3)), rng.uniform(*opacity, n),
                         rng.uniform(-1, 1, (n, 1, 3)))


def random_surfels(rng, n, depth=(2.0, 4.0), spread=0.6, scale=(0.1, 0.4), opacity=(0.2, 0.8), tilt=0.5):
    centers = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    normals = np.c_[rng.uniform(-tilt, tilt, (n, 2)), -np.ones(n)]
    F = frame_from_normal(normals / np.linalg.norm(normals, axis=1, keepdims=True))
    return SurfelCloud(centers, F[:, :, 0], F[:, :, 1], rng.uniform(*scale, (n, 2)),
                       rng.uniform(*opacity, n), rng.uniform(-1, 1, (n, 1, 3)))


@pytest.fixture
def cam16():
    return small_camera()


__all__ = ["small_camera", "random_gaussians", "random_surfels", "rotmat_to_quat"]
