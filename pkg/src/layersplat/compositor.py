"""Depth-ordered fusion of a road layer and an environment layer.

Per pixel, with delta the "road is behind" indicator (hard) or its sigmoid
relaxation (smooth)::

    lambda_r = T_e * delta + (1 - delta)
    lambda_e = T_r * (1 - delta) + delta
    I_c = lambda_r * I_r + lambda_e * I_e
    D_c = lambda_r * D_r + lambda_e * D_e
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .scene import LayerRender

MODES = ("hard", "smooth")
DEFAULT_S_SIGMA = 10.0


def delta_hard(depth_road, depth_env):
    return (np.asarray(depth_road) > np.asarray(depth_env)).astype(np.float64)


def delta_smooth(depth_road, depth_env, s_sigma=DEFAULT_S_SIGMA):
    if s_sigma <= 0:
        raise ValueError("s_sigma must be positive")
    return expit(s_sigma * (np.asarray(depth_road, dtype=np.float64) - np.asarray(depth_env, dtype=np.float64)))


@dataclass(eq=False)
class Composite:
    image: np.ndarray
    depth: np.ndarray
    lambda_road: np.ndarray
    lambda_env: np.ndarray
    delta: np.ndarray
    mode: str
    s_sigma: float
    background: np.ndarray


def _check(road: LayerRender, env: LayerRender):
    if road.color.shape != env.color.shape or road.depth.shape != env.depth.shape:
        raise ValueError(f"layer shapes differ: {road.color.shape} vs {env.color.shape}")


def composite(road: LayerRender, env: LayerRender, mode="smooth", s_sigma=DEFAULT_S_SIGMA,
              background=None) -> Composite:
    """Fuse two layer renders.

    ``background`` (RGB) fills whatever light passes through both layers, i.e.
    it is added with weight T_r * T_e. The default is black.
    """
    _check(road, env)
    if mode == "hard":
        delta = delta_hard(road.depth, env.depth)
    elif mode == "smooth":
        delta = delta_smooth(road.depth, env.depth, s_sigma)
    else:
        raise ValueError(f"unknown composite mode {mode!r}")
    lam_r = env.transmittance * delta + (1.0 - delta)
    lam_e = road.transmittance * (1.0 - delta) + delta
    image = lam_r[..., None] * road.color + lam_e[..., None] * env.color
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    if np.any(bg != 0):
        image = image + (road.transmittance * env.transmittance)[..., None] * bg
    depth = lam_r * road.depth + lam_e * env.depth
    return Composite(image, depth, lam_r, lam_e, delta, mode, s_sigma, bg)


def composite_backward(road: LayerRender, env: LayerRender, comp: Composite, grad_image,
                       grad_depth=None):
    """Chain dL/dI_c (and optionally dL/dD_c) back to both layers.

    Returns ``(road_grads, env_grads)``, each a dict with keys ``color``,
    ``depth`` and ``transmittance``. In hard mode the indicator is a constant.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    gD = np.zeros(road.depth.shape) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    delta = comp.delta
    d_lam_r = np.sum(grad_image * road.color, axis=-1) + gD * road.depth
    d_lam_e = np.sum(grad_image * env.color, axis=-1) + gD * env.depth

    road_g = {"color": comp.lambda_road[..., None] * grad_image,
              "depth": comp.lambda_road * gD,
              "transmittance": d_lam_e * (1.0 - delta)}
    env_g = {"color": comp.lambda_env[..., None] * grad_image,
             "depth": comp.lambda_env * gD,
             "transmittance": d_lam_r * delta}
    if np.any(comp.background != 0):
        d_bg = np.sum(grad_image * comp.background, axis=-1)
        road_g["transmittance"] = road_g["transmittance"] + d_bg * env.transmittance
        env_g["transmittance"] = env_g["transmittance"] + d_bg * road.transmittance

    if comp.mode == "smooth":
        # d lambda_r / d delta = T_e - 1, d lambda_e / d delta = 1 - T_r
        d_delta = d_lam_r * (env.transmittance - 1.0) + d_lam_e * (1.0 - road.transmittance)
        d_diff = d_delta * comp.s_sigma * delta * (1.0 - delta)
        road_g["depth"] = road_g["depth"] + d_diff
        env_g["depth"] = env_g["depth"] - d_diff
    return road_g, env_g
