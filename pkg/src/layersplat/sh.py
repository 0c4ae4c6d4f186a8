"""Real spherical-harmonics colour evaluation (degrees 0-2) and its adjoint."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def num_coeffs(degree):
    return (degree + 1) ** 2


def degree_of(n_coeffs):
    for deg in range(3):
        if num_coeffs(deg) == n_coeffs:
            return deg
    raise ValueError(f"unsupported SH coefficient count {n_coeffs}")


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


def _basis(dirs, degree):
    """Basis values (N, K) and their derivatives w.r.t. the unit direction (N, K, 3)."""
    n = dirs.shape[0]
    k = num_coeffs(degree)
    B = np.zeros((n, k))
    dB = np.zeros((n, k, 3))
    B[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        dB[:, 1, 1] = -SH_C1
        dB[:, 2, 2] = SH_C1
        dB[:, 3, 0] = -SH_C1
    if degree >= 2:
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (x * x - y * y)
        dB[:, 4, 0] = SH_C2[0] * y
        dB[:, 4, 1] = SH_C2[0] * x
        dB[:, 5, 1] = SH_C2[1] * z
        dB[:, 5, 2] = SH_C2[1] * y
        dB[:, 6, 0] = -2 * SH_C2[2] * x
        dB[:, 6, 1] = -2 * SH_C2[2] * y
        dB[:, 6, 2] = 4 * SH_C2[2] * z
        dB[:, 7, 0] = SH_C2[3] * z
        dB[:, 7, 2] = SH_C2[3] * x
        dB[:, 8, 0] = 2 * SH_C2[4] * x
        dB[:, 8, 1] = -2 * SH_C2[4] * y
    return B, dB


def eval_sh(sh, dirs):
    """Colour of each primitive seen along ``dirs`` (unnormalised, camera -> primitive).

    ``sh`` has shape (N, K, 3). The result is clamped at zero from below, like the
    reference 3DGS rasterizer.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = degree_of(sh.shape[1])
    if degree == 0:
        return np.maximum(sh[:, 0, :] * SH_C0 + 0.5, 0.0)
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    B, _ = _basis(unit, degree)
    return np.maximum(np.einsum("nk,nkc->nc", B, sh) + 0.5, 0.0)


def eval_sh_backward(sh, dirs, grad_rgb):
    """Adjoint of :func:`eval_sh`; returns (d_sh, d_dirs)."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = degree_of(sh.shape[1])
    norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    unit = dirs / norm
    B, dB = _basis(unit, degree)
    raw = np.einsum("nk,nkc->nc", B, sh) + 0.5
    g = np.where(raw > 0.0, grad_rgb, 0.0)
    d_sh = B[:, :, None] * g[:, None, :]
    if degree == 0:
        return d_sh, np.zeros_like(dirs)
    d_unit = np.einsum("nkd,nkc,nc->nd", dB, sh, g)
    # d(unit)/d(dir) = (I - u u^T) / |dir|
    d_dirs = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norm
    return d_sh, d_dirs
