import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from layersplat.scene import (Camera, Gaussian3D, GaussianCloud, LayerRender, SemanticPointCloud,
                              Surfel2D, covariance_of, frame_from_normal, quat_to_rotmat,
                              quat_to_rotmat_backward, rotmat_to_quat, surfel_normal)

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)
scales = st.lists(st.floats(0.01, 5.0), min_size=3, max_size=3)


def unit(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def test_covariance_identity():
    g = Gaussian3D([0, 0, 0], [1, 0, 0, 0], [1, 1, 1], 0.5, [0, 0, 0])
    np.testing.assert_allclose(covariance_of(g), np.eye(3), atol=1e-15)


def test_covariance_diagonal():
    g = Gaussian3D([0, 0, 0], [1, 0, 0, 0], [2, 1, 1], 0.5, [0, 0, 0])
    np.testing.assert_allclose(covariance_of(g), np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_covariance_rotated_z90():
    # hand product: R = [[0,-1,0],[1,0,0],[0,0,1]], R diag(4,1,1) R^T = diag(1,4,1)
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    g = Gaussian3D([0, 0, 0], q, [2, 1, 1], 0.5, [0, 0, 0])
    np.testing.assert_allclose(covariance_of(g), np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_quat_matches_scipy():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(20, 4))
    ref = Rotation.from_quat(np.c_[q[:, 1:], q[:, :1]]).as_matrix()
    np.testing.assert_allclose(quat_to_rotmat(q), ref, atol=1e-12)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(ref)), ref, atol=1e-12)


def test_quat_backward_fd():
    rng = np.random.default_rng(1)
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    analytic = quat_to_rotmat_backward(q, G)
    h = 1e-6
    num = [(np.sum(G * quat_to_rotmat(q + h * e)) - np.sum(G * quat_to_rotmat(q - h * e))) / (2 * h)
           for e in np.eye(4)]
    np.testing.assert_allclose(analytic, num, rtol=1e-6, atol=1e-9)


@given(quats, scales)
def test_covariance_sign_flip_invariant(q, s):
    q = unit(q)
    a = covariance_of(Gaussian3D([0, 0, 0], q, s, 0.5, [0, 0, 0]))
    b = covariance_of(Gaussian3D([0, 0, 0], -q, s, 0.5, [0, 0, 0]))
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(quats, scales)
def test_covariance_eigenvalues_are_squared_scales(q, s):
    S = covariance_of(Gaussian3D([0, 0, 0], unit(q), s, 0.5, [0, 0, 0]))
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    ev = np.linalg.eigvalsh(S)
    np.testing.assert_allclose(np.sort(ev), np.sort(np.square(s)), rtol=1e-9, atol=1e-12)


def test_surfel_normal_examples():
    s = Surfel2D([0, 0, 0], [1, 0, 0], [0, 1, 0], 1, 1, 0.5, [0, 0, 0])
    np.testing.assert_allclose(surfel_normal(s), [0, 0, 1])
    s = Surfel2D([0, 0, 0], [0, 1, 0], [1, 0, 0], 1, 1, 0.5, [0, 0, 0])
    np.testing.assert_allclose(surfel_normal(s), [0, 0, -1])


@given(quats)
def test_surfel_normal_orthogonal(q):
    R = quat_to_rotmat(unit(q))
    s = Surfel2D([0, 0, 0], R[:, 0], R[:, 1], 1, 1, 0.5, [0, 0, 0])
    n = surfel_normal(s)
    assert abs(n @ s.tangent_u) < 1e-6 and abs(n @ s.tangent_v) < 1e-6
    np.testing.assert_allclose(n, np.cross(R[:, 0], R[:, 1]), atol=1e-12)
    assert abs(np.linalg.norm(n) - 1) < 1e-12


def test_frame_from_normal_right_handed():
    rng = np.random.default_rng(3)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    F = frame_from_normal(n)
    np.testing.assert_allclose(F[:, :, 2], n, atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(F), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.einsum("nij,nik->njk", F, F), np.broadcast_to(np.eye(3), F.shape), atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(rotation=[1, 1, 0, 0]), dict(scale=[1, 0, 1]), dict(opacity=1.0), dict(opacity=0.0),
])
def test_gaussian_validation(kwargs):
    base = dict(mean=[0, 0, 0], rotation=[1, 0, 0, 0], scale=[1, 1, 1], opacity=0.5, color=[0, 0, 0])
    base.update(kwargs)
    with pytest.raises(ValueError):
        Gaussian3D(**base)


@pytest.mark.parametrize("kwargs", [
    dict(tangent_v=[1, 0, 0]), dict(tangent_u=[2, 0, 0]), dict(scale_u=-1.0), dict(opacity=1.5),
])
def test_surfel_validation(kwargs):
    base = dict(center=[0, 0, 0], tangent_u=[1, 0, 0], tangent_v=[0, 1, 0], scale_u=1.0, scale_v=1.0,
                opacity=0.5, color=[0, 0, 0])
    base.update(kwargs)
    with pytest.raises(ValueError):
        Surfel2D(**base)


def test_camera_validation_and_projection():
    with pytest.raises(ValueError):
        Camera(fx=0, fy=1, cx=0, cy=0, width=4, height=4, world_to_cam=np.eye(4))
    with pytest.raises(ValueError):
        Camera(fx=1, fy=1, cx=0, cy=0, width=4, height=4, world_to_cam=np.eye(4), near=2, far=1)
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        Camera(fx=1, fy=1, cx=0, cy=0, width=4, height=4, world_to_cam=bad)
    cam = Camera(fx=100, fy=100, cx=50, cy=40, width=100, height=80, world_to_cam=np.eye(4))
    uv, z = cam.project(np.array([[0.2, -0.1, 2.0]]))
    np.testing.assert_allclose(uv, [[60.0, 35.0]])
    assert z[0] == 2.0


def test_camera_roundtrip_and_translation():
    cam = Camera.look_at((1, 2, 1.5), (10, 2, 0), width=32, height=24, fx=20)
    again = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(again.world_to_cam, cam.world_to_cam)
    moved = cam.translated((0, 1, 0))
    np.testing.assert_allclose(moved.center, cam.center + [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(moved.R, cam.R)


def test_look_at_centre_pixel_ray():
    cam = Camera.look_at((0, 0, 1), (5, 0, 1), width=16, height=16, fx=10)
    uv, z = cam.project(np.array([[5.0, 0.0, 1.0]]))
    np.testing.assert_allclose(uv, [[8.0, 8.0]], atol=1e-12)
    assert z[0] == pytest.approx(5.0)


def test_cloud_roundtrip_and_empty():
    g = [Gaussian3D([i, 0, 0], [1, 0, 0, 0], [1, 1, 1], 0.5, [0, 0, 0]) for i in range(3)]
    c = GaussianCloud.from_list(g)
    assert len(c) == 3 and len(GaussianCloud.empty()) == 0
    np.testing.assert_array_equal(c[2].mean, [2, 0, 0])
    e = LayerRender.empty(2, 3)
    assert e.color.shape == (2, 3, 3) and np.all(e.transmittance == 1)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        SemanticPointCloud([[np.nan, 0, 0]], None, None)
    with pytest.raises(ValueError):
        SemanticPointCloud([[0, 0, 0]], None, [7])
    pc = SemanticPointCloud(np.zeros((2, 3)), None, None)
    np.testing.assert_array_equal(pc.colors, 0.5)
