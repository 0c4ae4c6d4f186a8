"""Tile-based splatting of one layer into colour, depth and transmittance maps.

Two primitive kinds are supported: 3D Gaussians (EWA projection to screen
ellipses, sorted by view-space depth of the mean) and 2D surfels (exact
ray-splat intersection, sorted per pixel by intersection depth). Both share
the same front-to-back compositing::

    C = sum_i c_i a_i T_i,   D = sum_i d_i a_i T_i,   T = prod_i (1 - a_i)

``render_layer_backward`` returns exact gradients of that forward pass with
respect to the primitive parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import sh as shlib
from .scene import (EMPTY_DEPTH, Camera, Gaussian3D, GaussianCloud, LayerRender, Surfel2D,
                    SurfelCloud, quat_to_rotmat, quat_to_rotmat_backward)

TILE = K.TILE
LOWPASS_DILATION = 0.3
MIN_COV_DET = 1e-12
FRUSTUM_SLACK = 1.3
_BOX_MARGIN = 1e-6


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------


def _extent_radius(opacities):
    """Mahalanobis radius beyond which opacity * G < 1/255 (nan where never visible)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 2.0 * np.log(255.0 * np.minimum(opacities, K.ALPHA_MAX))
    return np.where(r2 > 0, np.sqrt(np.maximum(r2, 0.0)), np.nan)


def _pixel_range(lo, hi, size):
    """Inclusive pixel index range whose centres (j + 0.5) fall inside [lo, hi]."""
    a = np.ceil(lo - 0.5 - _BOX_MARGIN)
    b = np.floor(hi - 0.5 + _BOX_MARGIN)
    return np.clip(a, 0, size - 1).astype(np.int64), np.clip(b, -1, size - 1).astype(np.int64), (b >= 0) & (a <= size - 1) & (a <= b)


def _bin(valid, x0, x1, y0, y1, sort_key, width, height):
    """Per-tile primitive lists as CSR arrays (tile_start, tile_prim)."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    idx = np.flatnonzero(valid)
    tx0, tx1 = x0[idx] // TILE, x1[idx] // TILE
    ty0, ty1 = y0[idx] // TILE, y1[idx] // TILE
    ntx = tx1 - tx0 + 1
    counts = ntx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    prim = np.repeat(idx, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - first
    rep_ntx = np.repeat(ntx, counts)
    tile = (np.repeat(ty0, counts) + off // rep_ntx) * tiles_x + np.repeat(tx0, counts) + off % rep_ntx
    order = np.lexsort((prim, sort_key[prim], tile))
    tile = tile[order]
    tile_prim = prim[order].astype(np.int64)
    tile_start = np.searchsorted(tile, np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return tile_start, tile_prim, tiles_x


# ---------------------------------------------------------------------------
# 3D Gaussians
# ---------------------------------------------------------------------------


@dataclass
class _GaussianProjection:
    valid: np.ndarray
    p_cam: np.ndarray
    R: np.ndarray
    M: np.ndarray  # camera-space 3D covariance
    J: np.ndarray
    clamped: np.ndarray  # (n, 2) x/z, y/z pinned at the frustum limit
    cov2d: np.ndarray
    conic: np.ndarray
    means2d: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray


def _project_gaussians(cloud: GaussianCloud, cam: Camera) -> _GaussianProjection:
    n = len(cloud)
    Rc, tc = cam.R, cam.t
    p_cam = cloud.means @ Rc.T + tc
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = (z > cam.near) & (z < cam.far)
    zs = np.where(valid, z, 1.0)
    R = quat_to_rotmat(cloud.rotations)
    RS = R * cloud.scales[:, None, :]
    cov3 = RS @ np.swapaxes(RS, 1, 2)
    M = Rc @ cov3 @ Rc.T
    # the affine approximation is only trusted a little beyond the frustum; far off-axis
    # Gaussians would otherwise smear across the whole image
    lim = FRUSTUM_SLACK * np.array([(cam.width / 2) / cam.fx, (cam.height / 2) / cam.fy])
    tx = np.clip(x / zs, -lim[0], lim[0])
    ty = np.clip(y / zs, -lim[1], lim[1])
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * tx / zs
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * ty / zs
    cov2d = J @ M @ np.swapaxes(J, 1, 2) + LOWPASS_DILATION * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    valid &= det > MIN_COV_DET
    dets = np.where(valid, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / dets, -cov2d[:, 0, 1] / dets, cov2d[:, 0, 0] / dets], axis=1)
    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    dirs = cloud.means - cam.center
    colors = shlib.eval_sh(cloud.sh, dirs) if n else np.zeros((0, 3))
    clamped = np.stack([tx != x / zs, ty != y / zs], axis=1)
    return _GaussianProjection(valid, p_cam, R, M, J, clamped, cov2d, conic, means2d, dirs, colors)


def project_gaussian3d(g: Gaussian3D, cam: Camera):
    """Screen-space mean, 2x2 covariance and view depth of one Gaussian.

    Returns ``None`` when the Gaussian is culled (behind the near plane or
    degenerate after projection).
    """
    proj = _project_gaussians(GaussianCloud.from_list([g]), cam)
    if not proj.valid[0]:
        return None
    return proj.means2d[0], proj.cov2d[0], float(proj.p_cam[0, 2])


def _gaussian_bins(cloud, proj, cam):
    r = _extent_radius(cloud.opacities)
    valid = proj.valid & np.isfinite(r)
    r = np.where(valid, r, 0.0)
    ex = r * np.sqrt(np.maximum(proj.cov2d[:, 0, 0], 0.0))
    ey = r * np.sqrt(np.maximum(proj.cov2d[:, 1, 1], 0.0))
    x0, x1, okx = _pixel_range(proj.means2d[:, 0] - ex, proj.means2d[:, 0] + ex, cam.width)
    y0, y1, oky = _pixel_range(proj.means2d[:, 1] - ey, proj.means2d[:, 1] + ey, cam.height)
    valid &= okx & oky
    return _bin(valid, x0, x1, y0, y1, proj.p_cam[:, 2], cam.width, cam.height)


def _render_gaussians(cloud, cam):
    H, W = cam.height, cam.width
    proj = _project_gaussians(cloud, cam)
    tile_start, tile_prim, tiles_x = _gaussian_bins(cloud, proj, cam)
    color = np.zeros((H, W, 3))
    depth = np.empty((H, W))
    T = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    K.gaussian_forward(tile_start, tile_prim, tiles_x, H, W,
                       proj.means2d, proj.conic, np.ascontiguousarray(cloud.opacities),
                       np.ascontiguousarray(proj.colors), np.ascontiguousarray(proj.p_cam[:, 2]),
                       color, depth, T, last)
    ctx = dict(proj=proj, bins=(tile_start, tile_prim, tiles_x), T=T, last=last)
    return LayerRender(color, depth, T), ctx


def _reduce_pairs(tile_prim, pair_grad, n):
    out = np.zeros((n, pair_grad.shape[1]))
    for c in range(pair_grad.shape[1]):
        out[:, c] = np.bincount(tile_prim, weights=pair_grad[:, c], minlength=n)
    return out


def _gaussians_backward(cloud, cam, grad_color, grad_depth, grad_T, ctx):
    H, W = cam.height, cam.width
    proj = ctx["proj"]
    tile_start, tile_prim, tiles_x = ctx["bins"]
    n = len(cloud)
    pair_grad = np.zeros((len(tile_prim), 10))
    K.gaussian_backward(tile_start, tile_prim, tiles_x, H, W,
                        proj.means2d, proj.conic, np.ascontiguousarray(cloud.opacities),
                        np.ascontiguousarray(proj.colors), np.ascontiguousarray(proj.p_cam[:, 2]),
                        ctx["T"], ctx["last"], grad_color, grad_depth, grad_T, pair_grad)
    g = _reduce_pairs(tile_prim, pair_grad, n)
    d_mean2d, d_conic, d_opac, d_color, d_z = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9], g[:, 9]

    # conic -> 2D covariance; power uses a, 2b, c so the full-matrix gradient splits b
    dA = np.empty((n, 2, 2))
    dA[:, 0, 0] = d_conic[:, 0]
    dA[:, 0, 1] = dA[:, 1, 0] = 0.5 * d_conic[:, 1]
    dA[:, 1, 1] = d_conic[:, 2]
    A = np.empty((n, 2, 2))
    A[:, 0, 0] = proj.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = proj.conic[:, 1]
    A[:, 1, 1] = proj.conic[:, 2]
    d_cov2d = -A @ dA @ A

    J, Mc = proj.J, proj.M
    Jt = np.swapaxes(J, 1, 2)
    dM = Jt @ d_cov2d @ J
    dJ = 2.0 * d_cov2d @ J @ Mc
    d_cov3 = cam.R.T @ dM @ cam.R

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    z = np.where(proj.valid, z, 1.0)
    fx, fy = cam.fx, cam.fy
    d_p = np.zeros((n, 3))
    # J[0,2] = -fx * tx / z with tx = x / z, or a constant once clamped
    cx_, cy_ = proj.clamped[:, 0], proj.clamped[:, 1]
    tx, ty = -J[:, 0, 2] * z / fx, -J[:, 1, 2] * z / fy
    d_p[:, 0] = np.where(cx_, 0.0, dJ[:, 0, 2] * (-fx / z**2)) + d_mean2d[:, 0] * fx / z
    d_p[:, 1] = np.where(cy_, 0.0, dJ[:, 1, 2] * (-fy / z**2)) + d_mean2d[:, 1] * fy / z
    d_p[:, 2] = (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * np.where(cx_, fx * tx / z**2, 2 * fx * x / z**3)
                 + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * np.where(cy_, fy * ty / z**2, 2 * fy * y / z**3)
                 - d_mean2d[:, 0] * fx * x / z**2 - d_mean2d[:, 1] * fy * y / z**2 + d_z)
    d_p[~proj.valid] = 0.0
    d_cov3[~proj.valid] = 0.0

    d_sh, d_dirs = shlib.eval_sh_backward(cloud.sh, proj.dirs, d_color)
    d_means = d_p @ cam.R + d_dirs

    s = cloud.scales
    R = proj.R
    sym = d_cov3 + np.swapaxes(d_cov3, 1, 2)
    d_R = sym @ R * (s**2)[:, None, :]
    d_scales = 2.0 * s * np.einsum("nki,nkl,nli->ni", R, d_cov3, R)
    d_rot = quat_to_rotmat_backward(cloud.rotations, d_R)
    return {"means": d_means, "rotations": d_rot, "scales": d_scales,
            "opacities": d_opac, "sh": d_sh}


# ---------------------------------------------------------------------------
# surfels
# ---------------------------------------------------------------------------


@dataclass
class _SurfelProjection:
    valid: np.ndarray
    A: np.ndarray  # camera-space columns [s_u t_u, s_v t_v, centre]
    M: np.ndarray  # K @ A
    n_cam: np.ndarray
    center_cam: np.ndarray
    center2d: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray


def _project_surfels(cloud: SurfelCloud, cam: Camera) -> _SurfelProjection:
    n = len(cloud)
    Rc, tc = cam.R, cam.t
    a1 = (cloud.tangent_u * cloud.scales[:, :1]) @ Rc.T
    a2 = (cloud.tangent_v * cloud.scales[:, 1:]) @ Rc.T
    a3 = cloud.centers @ Rc.T + tc
    A = np.stack([a1, a2, a3], axis=-1)
    Mx = cam.K @ A
    z = a3[:, 2]
    valid = (z > cam.near) & (z < cam.far)
    zs = np.where(valid, z, 1.0)
    n_cam = np.cross(a1, a2)
    nn = np.linalg.norm(n_cam, axis=1, keepdims=True)
    valid &= nn[:, 0] > 0
    n_cam = n_cam / np.where(nn > 0, nn, 1.0)
    center2d = np.stack([cam.fx * a3[:, 0] / zs + cam.cx, cam.fy * a3[:, 1] / zs + cam.cy], axis=1)
    dirs = cloud.centers - cam.center
    colors = shlib.eval_sh(cloud.sh, dirs) if n else np.zeros((0, 3))
    return _SurfelProjection(valid, A, Mx, n_cam, a3, center2d, dirs, colors)


def intersect_surfel(s: Surfel2D, cam: Camera, pixel):
    """Splat-local (u, v) and view depth where the ray through ``pixel`` meets ``s``.

    ``pixel`` is a continuous image coordinate (x, y). Returns ``None`` for a
    ray (near-)parallel to the surfel plane.
    """
    proj = _project_surfels(SurfelCloud.from_list([s]), cam)
    M = proj.M[0]
    px, py = float(pixel[0]), float(pixel[1])
    hu = M[0] - px * M[2]
    hv = M[1] - py * M[2]
    p = np.cross(hu, hv)
    ray = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    if abs(proj.n_cam[0] @ ray) / np.linalg.norm(ray) < K.PARALLEL_EPS or p[2] == 0.0:
        return None
    u, v = p[0] / p[2], p[1] / p[2]
    return u, v, float(M[2] @ np.array([u, v, 1.0]))


def _surfel_bins(cloud, proj, cam):
    r = _extent_radius(cloud.opacities)
    valid = proj.valid & np.isfinite(r)
    r = np.where(valid, r, 0.0)
    W, H = cam.width, cam.height
    # disk footprint: projected corners of the bounding parallelogram
    su = (cloud.tangent_u * cloud.scales[:, :1] * r[:, None]) @ cam.R.T
    sv = (cloud.tangent_v * cloud.scales[:, 1:] * r[:, None]) @ cam.R.T
    corners = np.stack([proj.center_cam + a * su + b * sv for a in (-1, 1) for b in (-1, 1)], axis=1)
    cz = corners[..., 2]
    front = np.all(cz > cam.near, axis=1)
    czs = np.where(cz > cam.near, cz, 1.0)
    cu = cam.fx * corners[..., 0] / czs + cam.cx
    cv = cam.fy * corners[..., 1] / czs + cam.cy
    rf = r * K.SURFEL_FILTER_SIGMA
    lo_x = np.minimum(np.where(front, cu.min(axis=1), -np.inf), proj.center2d[:, 0] - rf)
    hi_x = np.maximum(np.where(front, cu.max(axis=1), np.inf), proj.center2d[:, 0] + rf)
    lo_y = np.minimum(np.where(front, cv.min(axis=1), -np.inf), proj.center2d[:, 1] - rf)
    hi_y = np.maximum(np.where(front, cv.max(axis=1), np.inf), proj.center2d[:, 1] + rf)
    lo_x, hi_x = np.clip(lo_x, -1.0, W + 1.0), np.clip(hi_x, -1.0, W + 1.0)
    lo_y, hi_y = np.clip(lo_y, -1.0, H + 1.0), np.clip(hi_y, -1.0, H + 1.0)
    x0, x1, okx = _pixel_range(lo_x, hi_x, W)
    y0, y1, oky = _pixel_range(lo_y, hi_y, H)
    valid &= okx & oky
    return _bin(valid, x0, x1, y0, y1, np.zeros(len(cloud)), W, H)


def _surfel_args(cloud, proj, cam):
    return (cam.fx, cam.fy, cam.cx, cam.cy, cam.near, np.ascontiguousarray(proj.M),
            np.ascontiguousarray(proj.n_cam), np.ascontiguousarray(proj.center2d),
            np.ascontiguousarray(cloud.opacities), np.ascontiguousarray(proj.colors))


def _render_surfels(cloud, cam):
    H, W = cam.height, cam.width
    proj = _project_surfels(cloud, cam)
    tile_start, tile_prim, tiles_x = _surfel_bins(cloud, proj, cam)
    color = np.zeros((H, W, 3))
    depth = np.empty((H, W))
    T = np.empty((H, W))
    K.surfel_forward(tile_start, tile_prim, tiles_x, H, W, *_surfel_args(cloud, proj, cam),
                     color, depth, T)
    ctx = dict(proj=proj, bins=(tile_start, tile_prim, tiles_x))
    return LayerRender(color, depth, T), ctx


def _surfels_backward(cloud, cam, grad_color, grad_depth, grad_T, ctx):
    H, W = cam.height, cam.width
    proj = ctx["proj"]
    tile_start, tile_prim, tiles_x = ctx["bins"]
    n = len(cloud)
    pair_grad = np.zeros((len(tile_prim), 15))
    K.surfel_backward(tile_start, tile_prim, tiles_x, H, W, *_surfel_args(cloud, proj, cam),
                      grad_color, grad_depth, grad_T, pair_grad)
    g = _reduce_pairs(tile_prim, pair_grad, n)
    dM = g[:, :9].reshape(n, 3, 3)
    d_c2d, d_opac, d_color = g[:, 9:11], g[:, 11], g[:, 12:15]

    dA = cam.K.T @ dM
    a3 = proj.center_cam
    z = np.where(proj.valid, a3[:, 2], 1.0)
    d_a3 = dA[:, :, 2].copy()
    d_a3[:, 0] += d_c2d[:, 0] * cam.fx / z
    d_a3[:, 1] += d_c2d[:, 1] * cam.fy / z
    d_a3[:, 2] -= (d_c2d[:, 0] * cam.fx * a3[:, 0] + d_c2d[:, 1] * cam.fy * a3[:, 1]) / z**2
    d_a1 = dA[:, :, 0] @ cam.R
    d_a2 = dA[:, :, 1] @ cam.R
    d_sh, d_dirs = shlib.eval_sh_backward(cloud.sh, proj.dirs, d_color)
    return {
        "centers": d_a3 @ cam.R + d_dirs,
        "tangent_u": d_a1 * cloud.scales[:, :1],
        "tangent_v": d_a2 * cloud.scales[:, 1:],
        "scales": np.stack([np.sum(d_a1 * cloud.tangent_u, axis=1),
                            np.sum(d_a2 * cloud.tangent_v, axis=1)], axis=1),
        "opacities": d_opac,
        "sh": d_sh,
    }


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_cloud(primitives):
    if isinstance(primitives, (GaussianCloud, SurfelCloud)):
        return primitives
    primitives = list(primitives)
    if not primitives:
        return GaussianCloud.empty()
    if all(isinstance(p, Gaussian3D) for p in primitives):
        return GaussianCloud.from_list(primitives)
    if all(isinstance(p, Surfel2D) for p in primitives):
        return SurfelCloud.from_list(primitives)
    raise TypeError("a layer must contain only Gaussian3D or only Surfel2D primitives")


def render_layer(primitives, cam: Camera, return_context=False):
    """Rasterize one layer into a :class:`LayerRender`.

    With ``return_context=True`` also returns the state reused by
    :func:`render_layer_backward`.
    """
    cloud = _as_cloud(primitives)
    if len(cloud) == 0:
        out, ctx = LayerRender.empty(cam.height, cam.width), None
    elif isinstance(cloud, SurfelCloud):
        out, ctx = _render_surfels(cloud, cam)
    else:
        out, ctx = _render_gaussians(cloud, cam)
    return (out, ctx) if return_context else out


def render_layer_backward(primitives, cam: Camera, grad_color, grad_depth=None, grad_T=None,
                          context=None):
    """Gradients of a scalar loss w.r.t. primitive parameters.

    ``grad_*`` are dL/dI (H, W, 3), dL/dD (H, W) and dL/dT (H, W); missing ones
    are zero. Keys of the returned dict follow the cloud's field names.
    """
    cloud = _as_cloud(primitives)
    H, W = cam.height, cam.width
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64).reshape(H, W, 3)
    grad_depth = np.zeros((H, W)) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64)
    grad_T = np.zeros((H, W)) if grad_T is None else np.ascontiguousarray(grad_T, dtype=np.float64)
    if len(cloud) == 0:
        return {}
    if context is None:
        _, context = render_layer(cloud, cam, return_context=True)
    if isinstance(cloud, SurfelCloud):
        return _surfels_backward(cloud, cam, grad_color, grad_depth, grad_T, context)
    return _gaussians_backward(cloud, cam, grad_color, grad_depth, grad_T, context)


def set_threads(n):
    """Cap the number of tile workers used by the kernels."""
    import numba

    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
