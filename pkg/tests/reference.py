"""Dense per-pixel reference renderer used as an oracle.

Independent of the tiled kernels: projection, intersection and ordering are
recomputed here with plain numpy (the surfel hit via a 3x3 linear solve).
Degree-0 colours only.
"""

import numpy as np

from layersplat.scene import EMPTY_DEPTH, quat_to_rotmat

C0 = 0.28209479177387814
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


def _dc_color(sh):
    return np.maximum(sh[:, 0, :] * C0 + 0.5, 0.0)


def gaussian_splats(cloud, cam):
    """Per-Gaussian (mean2d, inverse 2D covariance, depth, opacity, colour) after culling."""
    out = []
    if cloud is None or len(cloud) == 0:
        return out
    cols = _dc_color(cloud.sh)
    R = quat_to_rotmat(cloud.rotations)
    for k in range(len(cloud)):
        p = cam.R @ cloud.means[k] + cam.t
        x, y, z = p
        if z <= cam.near or z >= cam.far:
            continue
        S = R[k] @ np.diag(cloud.scales[k] ** 2) @ R[k].T
        # Jacobian evaluated at the view ray pinned to 1.3x the half field of view
        lx, ly = 1.3 * cam.width / (2 * cam.fx), 1.3 * cam.height / (2 * cam.fy)
        xj, yj = min(max(x / z, -lx), lx) * z, min(max(y / z, -ly), ly) * z
        J = np.array([[cam.fx / z, 0, -cam.fx * xj / z**2], [0, cam.fy / z, -cam.fy * yj / z**2]])
        cov = J @ cam.R @ S @ cam.R.T @ J.T + 0.3 * np.eye(2)
        if np.linalg.det(cov) < 1e-12:
            continue
        m2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        out.append(("g", m2, np.linalg.inv(cov), z, cloud.opacities[k], cols[k]))
    return out


def surfel_splats(cloud):
    out = []
    if cloud is None or len(cloud) == 0:
        return out
    cols = _dc_color(cloud.sh)
    for k in range(len(cloud)):
        out.append(("s", cloud.centers[k], cloud.tangent_u[k] * cloud.scales[k, 0],
                    cloud.tangent_v[k] * cloud.scales[k, 1], cloud.opacities[k], cols[k]))
    return out


def _surfel_hit(s, cam, px, py):
    _, c, a, b, op, col = s
    zc = (cam.R @ c + cam.t)[2]
    if zc <= cam.near or zc >= cam.far:
        return None
    ray_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    d = cam.R.T @ ray_cam
    n = np.cross(a, b)
    if abs(n @ d) / (np.linalg.norm(n) * np.linalg.norm(d)) < 1e-8:
        return None
    u, v, t = np.linalg.solve(np.stack([a, b, -d], axis=1), cam.center - c)
    if t < cam.near:  # t is the view depth because the camera-space ray has z = 1
        return None
    c2 = cam.fx * (cam.R @ c + cam.t)[0] / zc + cam.cx, cam.fy * (cam.R @ c + cam.t)[1] / zc + cam.cy
    g3 = np.exp(-0.5 * (u * u + v * v))
    g2 = np.exp(-0.5 * ((px - c2[0]) ** 2 + (py - c2[1]) ** 2) / 0.25)
    alpha = min(ALPHA_MAX, op * max(g3, g2))
    return (alpha, t, col) if alpha >= ALPHA_MIN else None


def pixel_hits(cam, gs, ss, px, py):
    """(alpha, depth, colour) of every splat reaching the pixel, front to back."""
    hits = []
    for g in gs:
        _, m2, conic, z, op, col = g
        dd = np.array([px, py]) - m2
        alpha = min(ALPHA_MAX, op * np.exp(-0.5 * dd @ conic @ dd))
        if alpha >= ALPHA_MIN:
            hits.append((alpha, z, col))
    for s in ss:
        h = _surfel_hit(s, cam, px, py)
        if h is not None:
            hits.append(h)
    hits.sort(key=lambda h: h[1])
    return hits


def max_hit_depth(cam, gaussians=None, surfels=None):
    """Per-pixel largest depth among contributing splats (0 where none)."""
    gs, ss = gaussian_splats(gaussians, cam), surfel_splats(surfels)
    out = np.zeros((cam.height, cam.width))
    for i in range(cam.height):
        for j in range(cam.width):
            hits = pixel_hits(cam, gs, ss, j + 0.5, i + 0.5)
            out[i, j] = max((h[1] for h in hits), default=0.0)
    return out


def reference_render(cam, gaussians=None, surfels=None):
    """(color, depth, T) of the union of both primitive sets, sorted per pixel by depth."""
    H, W = cam.height, cam.width
    gs = gaussian_splats(gaussians, cam)
    ss = surfel_splats(surfels)
    color = np.zeros((H, W, 3))
    depth = np.full((H, W), EMPTY_DEPTH)
    trans = np.ones((H, W))
    for i in range(H):
        for j in range(W):
            hits = pixel_hits(cam, gs, ss, j + 0.5, i + 0.5)
            T, c, d, any_hit = 1.0, np.zeros(3), 0.0, False
            for alpha, z, col in hits:
                if T * (1 - alpha) < T_MIN:
                    break
                c += col * alpha * T
                d += z * alpha * T
                T *= 1 - alpha
                any_hit = True
            color[i, j], trans[i, j] = c, T
            depth[i, j] = d if any_hit else EMPTY_DEPTH
    return color, depth, trans
