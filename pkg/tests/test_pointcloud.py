import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layersplat.pointcloud import (SKY_COLOR, DegenerateSceneError, add_sky_sphere, downsample,
                                   label_points, max_extent, split)
from layersplat.scene import Camera, Label, SemanticPointCloud

seeds = st.integers(0, 2**31 - 1)


def three_frames(size=16):
    eyes = [(-4.0, 0.0, 2.0), (0.0, -4.0, 2.0), (4.0, 1.0, 2.0)]
    return [Camera.look_at(e, (0, 0, 0), width=size, height=size, fx=size) for e in eyes]


def frames_with_votes(points, votes, size=16, rng=None):
    """Images and masks where point k lands on road in frame f iff votes[f][k]."""
    cams = three_frames(size)
    rng = rng or np.random.default_rng(0)
    images, masks = [], []
    for f, cam in enumerate(cams):
        img = rng.uniform(0, 1, (size, size, 3))
        mask = np.zeros((size, size), dtype=np.uint8)
        uv, _ = cam.project(points)
        for k, (u, v) in enumerate(uv):
            if votes[f][k]:
                mask[int(v), int(u)] = 1
        images.append(img)
        masks.append(mask)
    return cams, images, masks


def test_unanimous_road_and_majority():
    pts = np.array([[0.0, 0.0, 0.0], [0.3, 0.2, 0.0]])
    votes = [[1, 1], [1, 0], [1, 1]]
    cams, imgs, masks = frames_with_votes(pts, votes)
    pc = label_points(pts, cams, imgs, masks)
    assert pc.labels.tolist() == [Label.ROAD, Label.ROAD]
    votes = [[1, 0], [0, 0], [1, 1]]
    cams, imgs, masks = frames_with_votes(pts, votes)
    pc = label_points(pts, cams, imgs, masks)
    assert pc.labels.tolist() == [Label.ROAD, Label.NON_ROAD]


def test_mean_colour_of_sampled_pixels():
    pts = np.array([[0.1, -0.1, 0.2]])
    cams, imgs, masks = frames_with_votes(pts, [[1], [1], [1]])
    expected = np.zeros(3)
    for cam, img in zip(cams, imgs):
        (u, v), = cam.project(pts)[0]
        expected += img[int(v), int(u)]
    pc = label_points(pts, cams, imgs, masks)
    np.testing.assert_allclose(pc.colors[0], expected / 3, atol=1e-12)


def test_tie_goes_to_non_road():
    pts = np.array([[0.0, 0.0, 0.0]])
    cams, imgs, masks = frames_with_votes(pts, [[1], [0], [0]])
    pc = label_points(pts, cams[:2], imgs[:2], masks[:2])
    assert pc.labels[0] == Label.NON_ROAD


def test_point_behind_every_camera_is_grey_non_road():
    cam = Camera.look_at((0, 0, 1), (10, 0, 1), width=8, height=8, fx=8)
    pc = label_points(np.array([[-5.0, 0, 1]]), [cam], [np.ones((8, 8, 3))], [np.ones((8, 8))])
    assert pc.labels[0] == Label.NON_ROAD
    np.testing.assert_array_equal(pc.colors[0], [0.5, 0.5, 0.5])


def test_resolution_mismatch_rejected():
    cam = Camera.look_at((0, 0, 1), (10, 0, 1), width=8, height=8, fx=8)
    with pytest.raises(ValueError):
        label_points(np.zeros((1, 3)), [cam], [np.ones((8, 8, 3))], [np.ones((8, 9))])
    with pytest.raises(ValueError):
        label_points(np.zeros((1, 3)), [], [], [])


@given(seeds)
def test_labels_invariant_to_frame_order(seed):
    rng = np.random.default_rng(seed)
    pts = np.c_[rng.uniform(-0.5, 0.5, (20, 2)), np.zeros(20)]
    votes = rng.uniform(size=(3, 20)) > 0.5
    cams, imgs, masks = frames_with_votes(pts, votes, rng=rng)
    a = label_points(pts, cams, imgs, masks)
    order = rng.permutation(3)
    b = label_points(pts, [cams[i] for i in order], [imgs[i] for i in order], [masks[i] for i in order])
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.colors, b.colors)


def labelled(n_road, n_env, n_sky=0):
    labels = [Label.ROAD] * n_road + [Label.NON_ROAD] * n_env + [Label.SKY] * n_sky
    rng = np.random.default_rng(len(labels))
    return SemanticPointCloud(rng.normal(size=(len(labels), 3)), None, labels)


def test_split_examples():
    road, env = split(labelled(10, 5))
    assert (len(road), len(env)) == (10, 5)
    road, env = split(labelled(4, 0))
    assert (len(road), len(env)) == (4, 0)
    road, env = split(labelled(3, 2, 6))
    assert len(env) == 8 and np.sum(env.labels == Label.SKY) == 6
    with pytest.raises(DegenerateSceneError):
        split(labelled(0, 5))


@given(seeds)
def test_split_is_a_partition(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 30)
    labels[0] = Label.ROAD
    pc = SemanticPointCloud(rng.normal(size=(30, 3)), rng.uniform(size=(30, 3)), labels)
    road, env = split(pc)
    joined = np.r_[road.positions, env.positions]
    assert len(joined) == 30
    key = lambda a: a[np.lexsort(a.T)]  # noqa: E731
    np.testing.assert_array_equal(key(joined), key(pc.positions))


def unit_cube(n=500, seed=0):
    return SemanticPointCloud(np.random.default_rng(seed).uniform(0, 1, (n, 3)), None, None)


def test_sky_sphere_zero_points_is_identity():
    pc = unit_cube()
    assert add_sky_sphere(pc, 0) is pc


def test_sky_sphere_geometry():
    pc = unit_cube()
    out = add_sky_sphere(pc, 1000, seed=4)
    sky = out.positions[len(pc):]
    centre = pc.positions.mean(axis=0)
    r = 1.5 * max_extent(pc.positions)
    np.testing.assert_allclose(np.linalg.norm(sky - centre, axis=1), r, rtol=1e-9)
    assert np.all(sky[:, 2] >= centre[2])
    assert np.all(out.labels[len(pc):] == Label.SKY)
    np.testing.assert_array_equal(out.colors[len(pc):], np.tile(SKY_COLOR, (1000, 1)))
    again = add_sky_sphere(pc, 1000, seed=4)
    np.testing.assert_array_equal(out.positions, again.positions)


def test_sky_sphere_uniform_in_solid_angle():
    out = add_sky_sphere(unit_cube(), 20000, seed=1)
    sky = out.positions[500:]
    c = unit_cube().positions.mean(axis=0)
    cos_t = (sky[:, 2] - c[2]) / np.linalg.norm(sky - c, axis=1)
    # uniform on the hemisphere means cos(theta) ~ U(0, 1)
    hist, _ = np.histogram(cos_t, bins=10, range=(0, 1))
    assert np.all(np.abs(hist / 2000 - 1) < 0.1)


def test_sky_texture_mode_and_errors():
    out = add_sky_sphere(unit_cube(), 50, color_mode="texture")
    assert np.all((out.colors >= 0) & (out.colors <= 1))
    with pytest.raises(ValueError):
        add_sky_sphere(unit_cube(), 5, color_mode="plaid")


def test_max_extent_matches_brute_force():
    P = np.random.default_rng(6).normal(size=(300, 3))
    brute = np.max(np.linalg.norm(P[:, None] - P[None], axis=2))
    assert max_extent(P) == pytest.approx(brute)


def test_downsample_examples():
    pc = unit_cube(100)
    assert downsample(pc, 100) is pc
    d = downsample(pc, 10, seed=3)
    assert len(d) == 10 and len(np.unique(d.positions, axis=0)) == 10
    assert all(any(np.array_equal(p, q) for q in pc.positions) for p in d.positions)
    np.testing.assert_array_equal(d.positions, downsample(pc, 10, seed=3).positions)
    with pytest.raises(ValueError):
        downsample(pc, 0)
