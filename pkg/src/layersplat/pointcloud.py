"""Decoupled point-cloud preparation: label by mask projection, split, add a sky shell."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .scene import Camera, Label, SemanticPointCloud

SKY_COLOR = (0.7, 0.8, 0.95)
SKY_KAPPA = 1.5
GRAY = 0.5


class DegenerateSceneError(ValueError):
    """Raised when a scene has no road points, so no road prior can be built."""


def label_points(points, cameras, images, masks) -> SemanticPointCloud:
    """Majority road/non-road vote and mean colour over all frames that see each point.

    A point is visible in a frame if it has positive view depth and projects
    inside the image; occlusion is not tested. Ties go to non-road. Points no
    frame sees become grey non-road points.
    """
    P = points.positions if isinstance(points, SemanticPointCloud) else np.asarray(points, dtype=np.float64)
    P = P.reshape(-1, 3)
    if not cameras:
        raise ValueError("need at least one frame")
    if not (len(cameras) == len(images) == len(masks)):
        raise ValueError("cameras, images and masks must be aligned")
    n = len(P)
    samples = np.zeros((len(cameras), n, 3))
    road_votes = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.int64)
    for f, (cam, img, mask) in enumerate(zip(cameras, images, masks)):
        img = np.asarray(img, dtype=np.float64)
        mask = np.asarray(mask)
        if img.shape[:2] != mask.shape[:2]:
            raise ValueError(f"frame {f}: image {img.shape[:2]} and mask {mask.shape[:2]} differ")
        if img.shape[:2] != cam.shape:
            raise ValueError(f"frame {f}: image {img.shape[:2]} does not match camera {cam.shape}")
        uv, z = cam.project(P)
        with np.errstate(invalid="ignore"):
            vis = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        jj = np.floor(uv[vis, 0]).astype(np.int64)
        ii = np.floor(uv[vis, 1]).astype(np.int64)
        samples[f, vis] = img[ii, jj, :3]
        road_votes[vis] += mask[ii, jj] != 0
        seen += vis
    # sort over frames before summing so the mean does not depend on frame order
    colors = np.sort(samples, axis=0).sum(axis=0)
    visible = seen > 0
    colors[visible] /= seen[visible, None]
    colors[~visible] = GRAY
    labels = np.where(2 * road_votes > seen, Label.ROAD, Label.NON_ROAD).astype(np.uint8)
    return SemanticPointCloud(P, colors, labels)


def split(pc: SemanticPointCloud):
    """(road, environment); sky points join the environment."""
    road = pc.labels == Label.ROAD
    if not road.any():
        raise DegenerateSceneError("no road points: the road prior cannot be built")
    return pc.subset(np.flatnonzero(road)), pc.subset(np.flatnonzero(~road))


def max_extent(points):
    """Largest pairwise distance, via the convex hull when there is one."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(P) < 2:
        return 0.0
    if len(P) > 64:
        try:
            P = P[ConvexHull(P, qhull_options="QJ").vertices]
        except (QhullError, ValueError):
            pass
    return float(pdist(P).max())


def add_sky_sphere(pc: SemanticPointCloud, n_points, color_mode="constant", seed=0,
                   kappa=SKY_KAPPA, color=SKY_COLOR) -> SemanticPointCloud:
    """Append ``n_points`` sky points on the upper hemisphere around the cloud centroid.

    Radius is ``kappa`` times the largest pairwise extent of the input.
    Directions are uniform in solid angle. ``texture`` colours blend from a
    pale horizon to a deeper zenith by elevation.
    """
    if n_points == 0:
        return pc
    if len(pc) == 0:
        raise ValueError("sky sphere needs a nonempty cloud")
    if color_mode not in ("constant", "texture"):
        raise ValueError(f"unknown color mode {color_mode!r}")
    center = pc.positions.mean(axis=0)
    radius = kappa * max_extent(pc.positions)
    if radius <= 0:
        raise ValueError("cloud has zero extent")
    rng = np.random.default_rng(seed)
    cos_t = rng.uniform(0.0, 1.0, n_points)
    phi = rng.uniform(0.0, 2 * np.pi, n_points)
    sin_t = np.sqrt(1.0 - cos_t**2)
    dirs = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    pos = center + radius * dirs
    if color_mode == "constant":
        cols = np.tile(np.asarray(color, dtype=np.float64), (n_points, 1))
    else:
        horizon = np.array([0.85, 0.9, 0.98])
        zenith = np.array([0.35, 0.55, 0.9])
        cols = horizon + cos_t[:, None] * (zenith - horizon)
    sky = SemanticPointCloud(pos, cols, np.full(n_points, Label.SKY, dtype=np.uint8))
    return SemanticPointCloud.concat(pc, sky)


def downsample(pc: SemanticPointCloud, target, seed=0) -> SemanticPointCloud:
    """Uniform random subset of ``target`` points (input order preserved)."""
    if target < 1:
        raise ValueError("target must be >= 1")
    if target >= len(pc):
        return pc
    idx = np.sort(np.random.default_rng(seed).choice(len(pc), size=target, replace=False))
    return pc.subset(idx)
