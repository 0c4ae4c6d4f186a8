"""Per-pixel compositing kernels.

Each kernel runs one tile per ``prange`` iteration. Gradients are written to
per-(tile, primitive) pair slots, so no two threads ever touch the same memory
and the final reduction order does not depend on the thread count.
"""

import math

import numba
import numpy as np
from numba import njit, prange

from . import default_threads

numba.set_num_threads(min(default_threads(), numba.config.NUMBA_NUM_THREADS))

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
EMPTY_DEPTH = 1e6
SURFEL_FILTER_SIGMA = 0.5
PARALLEL_EPS = 1e-8


@njit(cache=True, parallel=True)
def gaussian_forward(tile_start, tile_prim, tiles_x, height, width,
                     means2d, conics, opac, colors, depths,
                     out_color, out_depth, out_T, out_last):
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        end = tile_start[t + 1]
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                last = start
                for k in range(start, end):
                    g = tile_prim[k]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy
                                    + conics[g, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opac[g] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    d += depths[g] * w
                    T = test_T
                    last = k + 1
                out_color[i, j, 0] = c0
                out_color[i, j, 1] = c1
                out_color[i, j, 2] = c2
                out_depth[i, j] = d if last > start else EMPTY_DEPTH
                out_T[i, j] = T
                out_last[i, j] = last


@njit(cache=True, parallel=True)
def gaussian_backward(tile_start, tile_prim, tiles_x, height, width,
                      means2d, conics, opac, colors, depths, out_T, out_last,
                      grad_color, grad_depth, grad_T, pair_grad):
    """pair_grad columns: mean2d(2), conic(3: a, b, c), opacity, colour(3), depth."""
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                last = out_last[i, j]
                if last <= start:
                    continue
                T_final = out_T[i, j]
                T = T_final
                gc0 = grad_color[i, j, 0]
                gc1 = grad_color[i, j, 1]
                gc2 = grad_color[i, j, 2]
                gd = grad_depth[i, j]
                gt = grad_T[i, j]
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                accd = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                ld = 0.0
                for k in range(last - 1, start - 1, -1):
                    g = tile_prim[k]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    a = conics[g, 0]
                    b = conics[g, 1]
                    c = conics[g, 2]
                    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    raw = opac[g] * G
                    alpha = min(ALPHA_MAX, raw)
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    pair_grad[k, 6] += gc0 * w
                    pair_grad[k, 7] += gc1 * w
                    pair_grad[k, 8] += gc2 * w
                    pair_grad[k, 9] += gd * w
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    accd = last_alpha * ld + (1.0 - last_alpha) * accd
                    last_alpha = alpha
                    lc0 = colors[g, 0]
                    lc1 = colors[g, 1]
                    lc2 = colors[g, 2]
                    ld = depths[g]
                    d_alpha = T * ((lc0 - acc0) * gc0 + (lc1 - acc1) * gc1 + (lc2 - acc2) * gc2
                                   + (ld - accd) * gd) - gt * T_final / (1.0 - alpha)
                    if raw > ALPHA_MAX:
                        continue
                    pair_grad[k, 5] += G * d_alpha
                    d_power = opac[g] * G * d_alpha
                    pair_grad[k, 0] += d_power * (a * dx + b * dy)
                    pair_grad[k, 1] += d_power * (b * dx + c * dy)
                    pair_grad[k, 2] += -0.5 * d_power * dx * dx
                    pair_grad[k, 3] += -d_power * dx * dy
                    pair_grad[k, 4] += -0.5 * d_power * dy * dy


@njit(cache=True)
def _surfel_hit(M, n_cam, center2d, opac, g, px, py, rx, ry, near, inv_sigma2):
    """Ray-splat intersection of pixel (px, py) with surfel g.

    Returns (ok, alpha, G, u, v, depth, used_3d, raw_alpha).
    """
    hu0 = M[g, 0, 0] - px * M[g, 2, 0]
    hu1 = M[g, 0, 1] - px * M[g, 2, 1]
    hu2 = M[g, 0, 2] - px * M[g, 2, 2]
    hv0 = M[g, 1, 0] - py * M[g, 2, 0]
    hv1 = M[g, 1, 1] - py * M[g, 2, 1]
    hv2 = M[g, 1, 2] - py * M[g, 2, 2]
    p0 = hu1 * hv2 - hu2 * hv1
    p1 = hu2 * hv0 - hu0 * hv2
    p2 = hu0 * hv1 - hu1 * hv0
    rn = math.sqrt(rx * rx + ry * ry + 1.0)
    cosang = abs(n_cam[g, 0] * rx + n_cam[g, 1] * ry + n_cam[g, 2]) / rn
    if cosang < PARALLEL_EPS or p2 == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, True, 0.0
    u = p0 / p2
    v = p1 / p2
    depth = M[g, 2, 0] * u + M[g, 2, 1] * v + M[g, 2, 2]
    if depth < near:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, True, 0.0
    rho3 = u * u + v * v
    dxf = px - center2d[g, 0]
    dyf = py - center2d[g, 1]
    rho2 = (dxf * dxf + dyf * dyf) * inv_sigma2
    used_3d = rho3 <= rho2
    rho = rho3 if used_3d else rho2
    G = math.exp(-0.5 * rho)
    raw = opac[g] * G
    alpha = min(ALPHA_MAX, raw)
    if alpha < ALPHA_MIN:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, True, 0.0
    return True, alpha, G, u, v, depth, used_3d, raw


@njit(cache=True, parallel=True)
def surfel_forward(tile_start, tile_prim, tiles_x, height, width, fx, fy, cx, cy, near,
                   M, n_cam, center2d, opac, colors,
                   out_color, out_depth, out_T):
    n_tiles = tile_start.shape[0] - 1
    inv_sigma2 = 1.0 / (SURFEL_FILTER_SIGMA * SURFEL_FILTER_SIGMA)
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        end = tile_start[t + 1]
        n = end - start
        cand_k = np.empty(n, dtype=np.int64)
        cand_depth = np.empty(n)
        cand_alpha = np.empty(n)
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            ry = (py - cy) / fy
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                rx = (px - cx) / fx
                m = 0
                for k in range(start, end):
                    g = tile_prim[k]
                    ok, alpha, G, u, v, depth, used_3d, raw = _surfel_hit(
                        M, n_cam, center2d, opac, g, px, py, rx, ry, near, inv_sigma2)
                    if ok:
                        cand_k[m] = k
                        cand_depth[m] = depth
                        cand_alpha[m] = alpha
                        m += 1
                order = np.argsort(cand_depth[:m], kind="mergesort")
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                hit = False
                for q in range(m):
                    s = order[q]
                    alpha = cand_alpha[s]
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    g = tile_prim[cand_k[s]]
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    d += cand_depth[s] * w
                    T = test_T
                    hit = True
                out_color[i, j, 0] = c0
                out_color[i, j, 1] = c1
                out_color[i, j, 2] = c2
                out_depth[i, j] = d if hit else EMPTY_DEPTH
                out_T[i, j] = T


@njit(cache=True, parallel=True)
def surfel_backward(tile_start, tile_prim, tiles_x, height, width, fx, fy, cx, cy, near,
                    M, n_cam, center2d, opac, colors,
                    grad_color, grad_depth, grad_T, pair_grad):
    """pair_grad columns: M (9, row-major), center2d (2), opacity, colour (3)."""
    n_tiles = tile_start.shape[0] - 1
    inv_sigma2 = 1.0 / (SURFEL_FILTER_SIGMA * SURFEL_FILTER_SIGMA)
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        end = tile_start[t + 1]
        n = end - start
        cand_k = np.empty(n, dtype=np.int64)
        cand_depth = np.empty(n)
        cand_alpha = np.empty(n)
        inc_T = np.empty(n)
        for i in range(ty * TILE, min(ty * TILE + TILE, height)):
            py = i + 0.5
            ry = (py - cy) / fy
            for j in range(tx * TILE, min(tx * TILE + TILE, width)):
                px = j + 0.5
                rx = (px - cx) / fx
                m = 0
                for k in range(start, end):
                    g = tile_prim[k]
                    ok, alpha, G, u, v, depth, used_3d, raw = _surfel_hit(
                        M, n_cam, center2d, opac, g, px, py, rx, ry, near, inv_sigma2)
                    if ok:
                        cand_k[m] = k
                        cand_depth[m] = depth
                        cand_alpha[m] = alpha
                        m += 1
                order = np.argsort(cand_depth[:m], kind="mergesort")
                T = 1.0
                n_inc = 0
                for q in range(m):
                    alpha = cand_alpha[order[q]]
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    inc_T[q] = T
                    T = test_T
                    n_inc += 1
                if n_inc == 0:
                    continue
                T_final = T
                gc0 = grad_color[i, j, 0]
                gc1 = grad_color[i, j, 1]
                gc2 = grad_color[i, j, 2]
                gd = grad_depth[i, j]
                gt = grad_T[i, j]
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                accd = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                ld = 0.0
                for q in range(n_inc - 1, -1, -1):
                    kk = cand_k[order[q]]
                    g = tile_prim[kk]
                    ok, alpha, G, u, v, depth, used_3d, raw = _surfel_hit(
                        M, n_cam, center2d, opac, g, px, py, rx, ry, near, inv_sigma2)
                    Tk = inc_T[q]
                    w = alpha * Tk
                    pair_grad[kk, 12] += gc0 * w
                    pair_grad[kk, 13] += gc1 * w
                    pair_grad[kk, 14] += gc2 * w
                    d_depth = gd * w
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    accd = last_alpha * ld + (1.0 - last_alpha) * accd
                    last_alpha = alpha
                    lc0 = colors[g, 0]
                    lc1 = colors[g, 1]
                    lc2 = colors[g, 2]
                    ld = depth
                    d_alpha = Tk * ((lc0 - acc0) * gc0 + (lc1 - acc1) * gc1 + (lc2 - acc2) * gc2
                                    + (ld - accd) * gd) - gt * T_final / (1.0 - alpha)
                    du = 0.0
                    dv = 0.0
                    if raw <= ALPHA_MAX:
                        pair_grad[kk, 11] += G * d_alpha
                        d_rho = -0.5 * opac[g] * G * d_alpha
                        if used_3d:
                            du = 2.0 * u * d_rho
                            dv = 2.0 * v * d_rho
                        else:
                            pair_grad[kk, 9] += -2.0 * (px - center2d[g, 0]) * inv_sigma2 * d_rho
                            pair_grad[kk, 10] += -2.0 * (py - center2d[g, 1]) * inv_sigma2 * d_rho
                    # depth = Mz . (u, v, 1)
                    pair_grad[kk, 6] += d_depth * u
                    pair_grad[kk, 7] += d_depth * v
                    pair_grad[kk, 8] += d_depth
                    du += d_depth * M[g, 2, 0]
                    dv += d_depth * M[g, 2, 1]
                    if du == 0.0 and dv == 0.0:
                        continue
                    hu0 = M[g, 0, 0] - px * M[g, 2, 0]
                    hu1 = M[g, 0, 1] - px * M[g, 2, 1]
                    hu2 = M[g, 0, 2] - px * M[g, 2, 2]
                    hv0 = M[g, 1, 0] - py * M[g, 2, 0]
                    hv1 = M[g, 1, 1] - py * M[g, 2, 1]
                    hv2 = M[g, 1, 2] - py * M[g, 2, 2]
                    p2 = hu0 * hv1 - hu1 * hv0
                    dp0 = du / p2
                    dp1 = dv / p2
                    dp2 = -(du * u + dv * v) / p2
                    # p = hu x hv
                    dhu0 = hv1 * dp2 - hv2 * dp1
                    dhu1 = hv2 * dp0 - hv0 * dp2
                    dhu2 = hv0 * dp1 - hv1 * dp0
                    dhv0 = dp1 * hu2 - dp2 * hu1
                    dhv1 = dp2 * hu0 - dp0 * hu2
                    dhv2 = dp0 * hu1 - dp1 * hu0
                    pair_grad[kk, 0] += dhu0
                    pair_grad[kk, 1] += dhu1
                    pair_grad[kk, 2] += dhu2
                    pair_grad[kk, 3] += dhv0
                    pair_grad[kk, 4] += dhv1
                    pair_grad[kk, 5] += dhv2
                    pair_grad[kk, 6] -= px * dhu0 + py * dhv0
                    pair_grad[kk, 7] -= px * dhu1 + py * dhv1
                    pair_grad[kk, 8] -= px * dhu2 + py * dhv2
