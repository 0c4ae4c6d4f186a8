"""Training objectives and image metrics, each with its analytic gradient.

Every ``*_loss`` function returns ``(value, grads)``; ``grads`` is a dict
keyed by the differentiable inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import DivergenceError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    """Weights of the total objective. ``l1`` mixes L1 against D-SSIM."""

    l1: float = 0.8
    tran: float = 0.1
    sdf: float = 1.0
    cons: float = 0.04
    tv: float = 0.1
    dist: float = 0.1
    normal: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.l1 > 1:
            raise ValueError("l1 mix weight must lie in [0, 1]")


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _filter_matrix(n):
    """Matrix form of the 1D Gaussian window with half-sample-symmetric borders."""
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    F = np.zeros((n, n))
    rows = np.repeat(np.arange(n), len(x))
    cols = (np.arange(n)[:, None] + x[None, :]).reshape(-1) % (2 * n)
    cols = np.where(cols >= n, 2 * n - 1 - cols, cols)
    np.add.at(F, (rows, cols), np.tile(g, n))
    F.setflags(write=False)
    return F


def _blur(img):
    """F_H X F_W^T per channel, for (H, W, C) input."""
    FH = _filter_matrix(img.shape[0])
    FW = _filter_matrix(img.shape[1])
    X = np.moveaxis(img, -1, 0)
    return np.moveaxis(FH @ X @ FW.T, 0, -1)


def _blur_adjoint(img):
    FH = _filter_matrix(img.shape[0])
    FW = _filter_matrix(img.shape[1])
    X = np.moveaxis(img, -1, 0)
    return np.moveaxis(FH.T @ X @ FW, 0, -1)


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx**2 + my**2 + SSIM_C1
    b2 = (exx - mx**2) + (eyy - my**2) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_map(img, ref):
    """Per-pixel, per-channel SSIM (11x11 Gaussian window, sigma 1.5)."""
    x, y = _as_hwc(img), _as_hwc(ref)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return (a1 * a2) / (b1 * b2)


def ssim(img, ref):
    return float(ssim_map(img, ref).mean())


def ssim_grad(img, ref):
    """Gradient of mean SSIM w.r.t. ``img``."""
    x, y = _as_hwc(img), _as_hwc(ref)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    num = a1 * a2
    den = b1 * b2
    g = 1.0 / x.size
    d_num_mx = 2 * my * a2 - 2 * my * a1
    d_den_mx = 2 * mx * b2 - 2 * mx * b1
    d_mx = g * (d_num_mx * den - num * d_den_mx) / den**2
    d_exx = g * (-num * b1) / den**2
    d_exy = g * (2 * a1) / den
    grad = _blur_adjoint(d_mx) + 2 * x * _blur_adjoint(d_exx) + y * _blur_adjoint(d_exy)
    return grad.reshape(np.shape(img))


def psnr(img, ref):
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------


def gs_loss(image, target, l1_weight=0.8):
    """lambda * L1 + (1 - lambda) * (1 - SSIM) / 2."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = image - target
    l1 = float(np.abs(diff).mean())
    value = l1_weight * l1
    grad = l1_weight * np.sign(diff) / diff.size
    if l1_weight < 1.0:
        value += (1.0 - l1_weight) * (1.0 - ssim(image, target)) / 2.0
        grad = grad - (1.0 - l1_weight) / 2.0 * ssim_grad(image, target)
    return value, {"image": grad}


# ---------------------------------------------------------------------------
# road SDF prior on surfels
# ---------------------------------------------------------------------------


def sin2_between(g, n):
    """sin^2 of the angle between rows of g and n, with gradients (d/dg, d/dn)."""
    c = np.sum(g * n, axis=-1)
    a = np.sum(g * g, axis=-1)
    b = np.sum(n * n, axis=-1)
    ok = (a > 0) & (b > 0)
    a_s, b_s = np.where(ok, a, 1.0), np.where(ok, b, 1.0)
    val = np.where(ok, 1.0 - c**2 / (a_s * b_s), 0.0)
    dg = np.where(ok[..., None], -2 * c[..., None] * n / (a_s * b_s)[..., None]
                  + 2 * (c**2)[..., None] * g / (a_s**2 * b_s)[..., None], 0.0)
    dn = np.where(ok[..., None], -2 * c[..., None] * g / (a_s * b_s)[..., None]
                  + 2 * (c**2)[..., None] * n / (a_s * b_s**2)[..., None], 0.0)
    return val, dg, dn


def sdf_loss(surfels, sdf, dist_weight=0.1, normal_weight=0.1):
    """Mean of dist_weight*|f(x)| + normal_weight*sin^2(grad f(x), t_u x t_v) over surfels.

    The SDF is frozen; gradients flow to surfel centres and tangents only.
    """
    n = len(surfels)
    if n == 0:
        return 0.0, {"centers": np.zeros((0, 3)), "tangent_u": np.zeros((0, 3)),
                     "tangent_v": np.zeros((0, 3))}
    xn = sdf.normalize(surfels.centers)
    f, g, cache = sdf.forward(xn, input_grad=True)
    tn = np.cross(surfels.tangent_u, surfels.tangent_v)
    s2, ds2_dg, ds2_dn = sin2_between(g, tn)
    value = float(np.mean(dist_weight * np.abs(f) + normal_weight * s2))
    df = dist_weight * np.sign(f) / n
    dg = normal_weight * ds2_dg / n
    dn = normal_weight * ds2_dn / n
    _, dxn = sdf.backward(cache, df, dg, param_grads=False)
    return value, {
        "centers": dxn * sdf.scale,
        "tangent_u": np.cross(surfels.tangent_v, dn),
        "tangent_v": np.cross(dn, surfels.tangent_u),
    }


# ---------------------------------------------------------------------------
# transmittance / boundary terms
# ---------------------------------------------------------------------------


def tran_loss(T_env, T_road, mask):
    """(||T_e - M||_F^2 + ||T_r - (1 - M)||_F^2) / |M|."""
    M = np.asarray(mask, dtype=np.float64)
    re = np.asarray(T_env, dtype=np.float64) - M
    rr = np.asarray(T_road, dtype=np.float64) - (1.0 - M)
    size = M.size
    value = float((np.sum(re * re) + np.sum(rr * rr)) / size)
    return value, {"T_env": 2.0 * re / size, "T_road": 2.0 * rr / size}


def banded_boundary(mask, width=5):
    """Pixels within Chebyshev distance ``width`` of a pixel with the other label."""
    if width < 1:
        raise ValueError("band width must be >= 1")
    M = np.asarray(mask).astype(bool)
    box = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    near_road = ndimage.binary_dilation(M, structure=box)
    near_other = ndimage.binary_dilation(~M, structure=box)
    return (M & near_other) | (~M & near_road)


def cons_loss(D_env, D_road, band, aggregate="maxmin", temperature=1.0):
    """Depth consistency of the two layers on the boundary band.

    ``maxmin``: max over band columns of the min over that column's band rows of
    |D_e - D_r|. ``softmax`` replaces the outer max by a temperature-smoothed
    log-sum-exp; ``mean`` averages |D_e - D_r| over the band.
    """
    D_env = np.asarray(D_env, dtype=np.float64)
    D_road = np.asarray(D_road, dtype=np.float64)
    band = np.asarray(band, dtype=bool)
    diff = D_env - D_road
    absd = np.abs(diff)
    sign = np.sign(diff)
    g_e = np.zeros_like(D_env)
    if not band.any():
        return 0.0, {"D_env": g_e, "D_road": -g_e}
    if aggregate == "mean":
        count = band.sum()
        g_e[band] = sign[band] / count
        return float(absd[band].mean()), {"D_env": g_e, "D_road": -g_e}
    cols = np.flatnonzero(band.any(axis=0))
    masked = np.where(band[:, cols], absd[:, cols], np.inf)
    rows = np.argmin(masked, axis=0)
    col_min = masked[rows, np.arange(len(cols))]
    if aggregate == "maxmin":
        jj = int(np.argmax(col_min))
        value = float(col_min[jj])
        g_e[rows[jj], cols[jj]] = sign[rows[jj], cols[jj]]
    elif aggregate == "softmax":
        z = col_min / temperature
        zmax = z.max()
        w = np.exp(z - zmax)
        value = float(temperature * (zmax + np.log(w.sum())))
        w /= w.sum()
        g_e[rows, cols] = w * sign[rows, cols]
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    return value, {"D_env": g_e, "D_road": -g_e}


def tv_loss(depth, band, reduction="sum"):
    """Sum over band pixels of sqrt((D[i,j-1]-D[i,j])^2 + (D[i+1,j]-D[i,j])^2).

    A neighbour outside the image contributes a zero difference.
    ``reduction="mean"`` divides by the band size instead.
    """
    D = np.asarray(depth, dtype=np.float64)
    band = np.asarray(band, dtype=bool)
    a = np.zeros_like(D)
    b = np.zeros_like(D)
    a[:, 1:] = D[:, :-1] - D[:, 1:]
    b[:-1, :] = D[1:, :] - D[:-1, :]
    norm = np.sqrt(a * a + b * b)
    value = float(norm[band].sum())
    live = band & (norm > 0)
    ga = np.where(live, a / np.where(live, norm, 1.0), 0.0)
    gb = np.where(live, b / np.where(live, norm, 1.0), 0.0)
    grad = -(ga + gb)
    grad[:, :-1] += ga[:, 1:]
    grad[1:, :] += gb[:-1, :]
    if reduction == "mean":
        count = max(int(band.sum()), 1)
        return value / count, {"depth": grad / count}
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return value, {"depth": grad}


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


def total_loss(parts, weights: LossWeights):
    """L_gs + w_tran L_tran + w_sdf L_sdf + w_cons L_cons + w_tv L_tv."""
    for name, value in parts.items():
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite {name} loss: {value}", term=name)
    return (parts.get("gs", 0.0) + weights.tran * parts.get("tran", 0.0)
            + weights.sdf * parts.get("sdf", 0.0) + weights.cons * parts.get("cons", 0.0)
            + weights.tv * parts.get("tv", 0.0))
