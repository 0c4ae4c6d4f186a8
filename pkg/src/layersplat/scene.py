"""Shared scene types: cameras, Gaussian/surfel primitives, point clouds, layer renders."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import sh as shlib

# Depth stored at pixels no splat touches. Finite so sigmoid blending stays NaN-free.
EMPTY_DEPTH = 1e6


class Label(enum.IntEnum):
    NON_ROAD = 0
    ROAD = 1
    SKY = 2


# ---------------------------------------------------------------------------
# rotation helpers
# ---------------------------------------------------------------------------


def quat_to_rotmat(q):
    """Rotation matrices (N, 3, 3) from quaternions (N, 4) in (w, x, y, z) order.

    Quaternions are normalised first, so any non-zero 4-vector is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, grad_R):
    """Gradient w.r.t. the raw (unnormalised) quaternion given dL/dR."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = grad_R
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R):
    """(w, x, y, z) quaternions with w >= 0 from rotation matrices."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def frame_from_normal(normals):
    """Right-handed frames [t_u, t_v, n] (N, 3, 3 as columns) with n the given unit normal."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.zeros_like(n)
    axis = np.argmin(np.abs(n), axis=1)
    helper[np.arange(len(n)), axis] = 1.0
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    return np.stack([tu, tv, n], axis=-1)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward).

    Pixel (row i, column j) has its centre at image coordinates (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        w2c = np.array(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_cam", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R = w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("world_to_cam rotation block is not orthonormal")
        if not np.allclose(w2c[3], [0, 0, 0, 1]):
            raise ValueError("world_to_cam must be a rigid 4x4 transform")

    @property
    def R(self):
        return self.world_to_cam[:3, :3]

    @property
    def t(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points):
        """Image coordinates (N, 2) and view depth z (N,) of world points."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def pixel_rays(self):
        """Unit world-space ray directions for every pixel centre, shape (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy, np.ones_like(j)], axis=-1)
        d = d @ self.R  # camera -> world (R^T d per pixel)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def translated(self, offset, frame="world"):
        """Copy of the camera with its centre moved by ``offset`` metres."""
        offset = np.asarray(offset, dtype=np.float64)
        if frame == "camera":
            offset = self.R.T @ offset
        elif frame != "world":
            raise ValueError(frame)
        w2c = self.world_to_cam.copy()
        w2c[:3, 3] = -self.R @ (self.center + offset)
        return replace(self, world_to_cam=w2c)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width, height, fx, fy=None,
                cx=None, cy=None, near=0.01, far=1000.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])  # rows: camera axes in world
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        return cls(fx=fx, fy=fy if fy is not None else fx,
                   cx=width / 2 if cx is None else cx, cy=height / 2 if cy is None else cy,
                   width=width, height=height, world_to_cam=w2c, near=near, far=far)

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_cam": [float(v) for v in self.world_to_cam.reshape(-1)],
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]),
                   world_to_cam=np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4),
                   near=float(d.get("near", 0.01)), far=float(d.get("far", 1000.0)))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_sh(color):
    c = np.asarray(color, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(1, 3)
    shlib.degree_of(c.shape[0])
    return c


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    """A single anisotropic 3D Gaussian. ``color`` holds SH coefficients (K, 3)."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", _as_sh(self.color))
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit norm")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Surfel2D:
    """A flat 2D Gaussian disk spanned by orthonormal tangents."""

    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        for name in ("center", "tangent_u", "tangent_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", _as_sh(self.color))
        tu, tv = self.tangent_u, self.tangent_v
        if abs(np.linalg.norm(tu) - 1) > 1e-6 or abs(np.linalg.norm(tv) - 1) > 1e-6:
            raise ValueError("tangents must be unit vectors")
        if abs(tu @ tv) > 1e-6:
            raise ValueError("tangents must be orthogonal")
        if self.scale_u <= 0 or self.scale_v <= 0:
            raise ValueError("scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie in (0, 1)")


def covariance_of(g: Gaussian3D) -> np.ndarray:
    R = quat_to_rotmat(g.rotation)
    M = R * g.scale
    return M @ M.T


def surfel_normal(s: Surfel2D) -> np.ndarray:
    n = np.cross(s.tangent_u, s.tangent_v)
    return n / np.linalg.norm(n)


@dataclass(eq=False)
class GaussianCloud:
    """Structure-of-arrays set of 3D Gaussians (one environment layer)."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    kind = "gaussian"

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, -1, 3) if n else np.zeros((0, 1, 3))

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.rotations[i], self.scales[i], float(self.opacities[i]), self.sh[i])

    @property
    def sh_degree(self):
        return shlib.degree_of(self.sh.shape[1])

    def covariances(self):
        M = quat_to_rotmat(self.rotations) * self.scales[:, None, :]
        return M @ np.swapaxes(M, 1, 2)

    def subset(self, idx):
        return GaussianCloud(self.means[idx], self.rotations[idx], self.scales[idx],
                             self.opacities[idx], self.sh[idx])

    def copy(self):
        return self.subset(slice(None))

    @classmethod
    def empty(cls, sh_degree=0):
        k = shlib.num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_list(cls, gaussians):
        if not gaussians:
            return cls.empty()
        return cls(np.stack([g.mean for g in gaussians]), np.stack([g.rotation for g in gaussians]),
                   np.stack([g.scale for g in gaussians]), np.array([g.opacity for g in gaussians]),
                   np.stack([g.color for g in gaussians]))

    @classmethod
    def concat(cls, a, b):
        return cls(np.concatenate([a.means, b.means]), np.concatenate([a.rotations, b.rotations]),
                   np.concatenate([a.scales, b.scales]), np.concatenate([a.opacities, b.opacities]),
                   np.concatenate([a.sh, b.sh]))


@dataclass(eq=False)
class SurfelCloud:
    """Structure-of-arrays set of 2D surfels (one road layer)."""

    centers: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    kind = "surfel"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64).reshape(n, 3)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 2)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, -1, 3) if n else np.zeros((0, 1, 3))

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i) -> Surfel2D:
        return Surfel2D(self.centers[i], self.tangent_u[i], self.tangent_v[i], float(self.scales[i, 0]),
                        float(self.scales[i, 1]), float(self.opacities[i]), self.sh[i])

    @property
    def sh_degree(self):
        return shlib.degree_of(self.sh.shape[1])

    def normals(self):
        n = np.cross(self.tangent_u, self.tangent_v)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def subset(self, idx):
        return SurfelCloud(self.centers[idx], self.tangent_u[idx], self.tangent_v[idx],
                           self.scales[idx], self.opacities[idx], self.sh[idx])

    def copy(self):
        return self.subset(slice(None))

    @classmethod
    def empty(cls, sh_degree=0):
        k = shlib.num_coeffs(sh_degree)
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros((0, 2)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_list(cls, surfels):
        if not surfels:
            return cls.empty()
        return cls(np.stack([s.center for s in surfels]), np.stack([s.tangent_u for s in surfels]),
                   np.stack([s.tangent_v for s in surfels]),
                   np.array([[s.scale_u, s.scale_v] for s in surfels]),
                   np.array([s.opacity for s in surfels]), np.stack([s.color for s in surfels]))

    @classmethod
    def concat(cls, a, b):
        return cls(*(np.concatenate([getattr(a, f), getattr(b, f)])
                     for f in ("centers", "tangent_u", "tangent_v", "scales", "opacities", "sh")))


# ---------------------------------------------------------------------------
# images and point clouds
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LayerRender:
    """Colour (H, W, 3), unnormalised expected depth (H, W), transmittance (H, W)."""

    color: np.ndarray
    depth: np.ndarray
    transmittance: np.ndarray

    @property
    def shape(self):
        return self.depth.shape

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width, 3)), np.full((height, width), EMPTY_DEPTH),
                   np.ones((height, width)))


@dataclass(eq=False)
class SemanticPointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.colors is None:
            self.colors = np.full((n, 3), 0.5)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.labels is None:
            self.labels = np.full(n, Label.NON_ROAD, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(n)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point coordinates must be finite")
        if n and self.labels.max() > max(Label):
            raise ValueError("unknown semantic label")

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        return SemanticPointCloud(self.positions[idx], self.colors[idx], self.labels[idx])

    @classmethod
    def concat(cls, *clouds):
        return cls(np.concatenate([c.positions for c in clouds]),
                   np.concatenate([c.colors for c in clouds]),
                   np.concatenate([c.labels for c in clouds]))
