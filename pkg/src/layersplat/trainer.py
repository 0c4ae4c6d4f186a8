"""Joint optimisation of the road (surfel) and environment (Gaussian) layers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from . import DivergenceError
from . import losses as L
from .compositor import DEFAULT_S_SIGMA, MODES, composite, composite_backward
from .rasterizer import render_layer, render_layer_backward
from .scene import (EMPTY_DEPTH, Camera, GaussianCloud, SemanticPointCloud, SurfelCloud,
                    frame_from_normal, quat_to_rotmat, quat_to_rotmat_backward, rotmat_to_quat)
from .sh import num_coeffs, rgb_to_sh

LOG_COLUMNS = ("iteration", "gs", "tran", "sdf", "cons", "tv", "total")
PRUNE_THRESHOLD = 0.005


@dataclass
class LearningRates:
    position: float = 1.6e-4
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"learning rate {name} must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: LearningRates = field(default_factory=LearningRates)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    mode: str = "smooth"
    s_sigma: float = DEFAULT_S_SIGMA
    band_width: int = 5
    cons_aggregate: str = "maxmin"
    tv_reduction: str = "mean"
    seed: int = 0
    snapshot_interval: int = 0
    sh_degree: int = 0
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    # confine environment centres to a box around their anchors; None = free means
    offset_bound: float | None = None
    offset_scale: float = 1.0
    prune: bool = False
    prune_interval: int = 500
    # drop pixels where a layer is empty (sentinel depth) from the depth-consistency and TV terms
    guard_empty_depth: bool = True

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.background = tuple(float(v) for v in self.background)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown composite mode {self.mode!r}")
        if self.s_sigma <= 0 or self.band_width < 1:
            raise ValueError("s_sigma must be positive and band_width >= 1")
        if self.offset_bound is not None and self.offset_bound <= 0:
            raise ValueError("offset_bound must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AnchorOffset:
    anchor: np.ndarray
    offset: np.ndarray
    scale_factor: np.ndarray
    bound: float

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if np.any(np.asarray(self.scale_factor) <= 0):
            raise ValueError("scale_factor must be positive")


def realize_offset(a: AnchorOffset):
    """anchor + bound * (2 * sigmoid(offset * scale_factor) - 1), componentwise."""
    z = np.asarray(a.offset, dtype=np.float64) * np.asarray(a.scale_factor, dtype=np.float64)
    return np.asarray(a.anchor, dtype=np.float64) + a.bound * (2.0 * expit(z) - 1.0)


def realize_offset_backward(a: AnchorOffset, grad_center):
    z = np.asarray(a.offset, dtype=np.float64) * np.asarray(a.scale_factor, dtype=np.float64)
    s = expit(z)
    return np.asarray(grad_center) * a.bound * 2.0 * s * (1.0 - s) * np.asarray(a.scale_factor)


@dataclass(eq=False)
class View:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = (np.asarray(self.mask) != 0).astype(np.float64)
        if self.image.shape[:2] != self.camera.shape or self.mask.shape != self.camera.shape:
            raise ValueError("image, mask and camera resolution differ")


# ---------------------------------------------------------------------------
# parameterisation
# ---------------------------------------------------------------------------


def knn_scale(points, k=3, floor=1e-4):
    """sqrt of the mean squared distance to the k nearest other points."""
    P = np.asarray(points, dtype=np.float64)
    if len(P) < 2:
        return np.full(len(P), 0.1)
    kk = min(k, len(P) - 1)
    d, _ = cKDTree(P).query(P, k=kk + 1)
    return np.maximum(np.sqrt(np.mean(d[:, 1:] ** 2, axis=1)), floor)


def _sh_init(colors, degree):
    sh = np.zeros((len(colors), num_coeffs(degree), 3))
    sh[:, 0, :] = rgb_to_sh(np.clip(colors, 0.0, 1.0))
    return sh


def init_road(road: SemanticPointCloud, sdf=None, cfg: TrainConfig | None = None):
    """Raw road parameters: one surfel per point, normal from the SDF gradient when given."""
    cfg = cfg or TrainConfig()
    P = road.positions
    n = len(P)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    if sdf is not None and n:
        _, g = sdf.query(P)
        gn = np.linalg.norm(g, axis=1)
        ok = gn > 1e-12
        normals[ok] = g[ok] / gn[ok, None]
    frames = frame_from_normal(normals) if n else np.zeros((0, 3, 3))
    s = knn_scale(P)
    return {
        "centers": P.copy(),
        "quats": rotmat_to_quat(frames) if n else np.zeros((0, 4)),
        "log_scales": np.log(np.stack([s, s], axis=1)) if n else np.zeros((0, 2)),
        "logit_opacities": np.full(n, logit(cfg.init_opacity)),
        "sh": _sh_init(road.colors, cfg.sh_degree),
    }


def init_env(env: SemanticPointCloud, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    P = env.positions
    n = len(P)
    s = knn_scale(P)
    p = {
        "quats": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        "log_scales": np.log(np.repeat(s[:, None], 3, axis=1)) if n else np.zeros((0, 3)),
        "logit_opacities": np.full(n, logit(cfg.init_opacity)),
        "sh": _sh_init(env.colors, cfg.sh_degree),
    }
    if cfg.offset_bound is None:
        p["means"] = P.copy()
    else:
        p["anchors"] = P.copy()
        p["offsets"] = np.zeros((n, 3))
    return p


def road_cloud(p) -> SurfelCloud:
    R = quat_to_rotmat(p["quats"]) if len(p["quats"]) else np.zeros((0, 3, 3))
    return SurfelCloud(p["centers"], R[:, :, 0], R[:, :, 1], np.exp(p["log_scales"]),
                       expit(p["logit_opacities"]), p["sh"])


def _env_anchor(p, cfg):
    n = len(p["anchors"])
    return AnchorOffset(p["anchors"], p["offsets"], np.full((n, 3), cfg.offset_scale), cfg.offset_bound)


def env_cloud(p, cfg: TrainConfig) -> GaussianCloud:
    means = p["means"] if "means" in p else realize_offset(_env_anchor(p, cfg))
    return GaussianCloud(means, p["quats"], np.exp(p["log_scales"]), expit(p["logit_opacities"]), p["sh"])


def _road_param_grads(p, cloud, g):
    out = {k: np.zeros_like(v) for k, v in p.items()}
    if not g:
        return out
    out["centers"] = g["centers"]
    dR = np.zeros((len(cloud), 3, 3))
    dR[:, :, 0] = g["tangent_u"]
    dR[:, :, 1] = g["tangent_v"]
    out["quats"] = quat_to_rotmat_backward(p["quats"], dR)
    out["log_scales"] = g["scales"] * cloud.scales
    out["logit_opacities"] = g["opacities"] * cloud.opacities * (1.0 - cloud.opacities)
    out["sh"] = g["sh"]
    return out


def _env_param_grads(p, cloud, g, cfg):
    out = {k: np.zeros_like(v) for k, v in p.items()}
    if not g:
        return out
    if "means" in p:
        out["means"] = g["means"]
    else:
        out["offsets"] = realize_offset_backward(_env_anchor(p, cfg), g["means"])
    out["quats"] = g["rotations"]
    out["log_scales"] = g["scales"] * cloud.scales
    out["logit_opacities"] = g["opacities"] * cloud.opacities * (1.0 - cloud.opacities)
    out["sh"] = g["sh"]
    return out


# ---------------------------------------------------------------------------
# one objective evaluation
# ---------------------------------------------------------------------------


def guarded_band(band, road, env):
    """Band pixels whose own and (left, lower) neighbour depths come from nonempty layers."""
    ok = (road.depth < EMPTY_DEPTH) & (env.depth < EMPTY_DEPTH)
    cons_band = band & ok
    left = np.ones_like(ok)
    left[:, 1:] = ok[:, :-1]
    down = np.ones_like(ok)
    down[:-1, :] = ok[1:, :]
    return cons_band, cons_band & left & down


def evaluate_objective(road_p, env_p, view: View, sdf, cfg: TrainConfig, band=None, need_grad=True):
    """Total loss, its parts and (optionally) gradients w.r.t. the raw parameters."""
    w = cfg.weights
    cam = view.camera
    road = road_cloud(road_p)
    env = env_cloud(env_p, cfg)
    rr, rctx = render_layer(road, cam, return_context=True)
    er, ectx = render_layer(env, cam, return_context=True)
    comp = composite(rr, er, cfg.mode, cfg.s_sigma, np.asarray(cfg.background))
    if band is None:
        band = L.banded_boundary(view.mask, cfg.band_width)
    cons_band, tv_band = guarded_band(band, rr, er) if cfg.guard_empty_depth else (band, band)

    parts, grads = {}, {}
    parts["gs"], g = L.gs_loss(comp.image, view.image, w.l1)
    grads["image"] = g["image"]
    parts["tran"], g = L.tran_loss(er.transmittance, rr.transmittance, view.mask)
    grads["T_env"], grads["T_road"] = w.tran * g["T_env"], w.tran * g["T_road"]
    parts["cons"], g = L.cons_loss(er.depth, rr.depth, cons_band, cfg.cons_aggregate)
    grads["D_env"], grads["D_road"] = w.cons * g["D_env"], w.cons * g["D_road"]
    parts["tv"], g = L.tv_loss(comp.depth, tv_band, cfg.tv_reduction)
    grads["D_comp"] = w.tv * g["depth"]
    if sdf is not None and len(road) and w.sdf > 0:
        parts["sdf"], sdf_g = L.sdf_loss(road, sdf, w.dist, w.normal)
    else:
        parts["sdf"], sdf_g = 0.0, None
    total = L.total_loss(parts, w)
    if not need_grad:
        return total, parts, None

    rg, eg = composite_backward(rr, er, comp, grads["image"], grads["D_comp"])
    road_g = render_layer_backward(road, cam, rg["color"], rg["depth"] + grads["D_road"],
                                   rg["transmittance"] + grads["T_road"], context=rctx)
    env_g = render_layer_backward(env, cam, eg["color"], eg["depth"] + grads["D_env"],
                                  eg["transmittance"] + grads["T_env"], context=ectx)
    if sdf_g is not None:
        for k in ("centers", "tangent_u", "tangent_v"):
            road_g[k] = road_g[k] + w.sdf * sdf_g[k]
    return total, parts, {"road": _road_param_grads(road_p, road, road_g),
                          "env": _env_param_grads(env_p, env, env_g, cfg)}


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


_GROUP = {"centers": "position", "means": "position", "offsets": "position", "quats": "rotation",
          "log_scales": "scale", "logit_opacities": "opacity", "sh": "color"}


class Adam:
    """Per-array Adam with 3DGS-style epsilon; state can be subset when pruning."""

    def __init__(self, params, lrs: LearningRates, b1=0.9, b2=0.999, eps=1e-15):
        self.lrs, self.b1, self.b2, self.eps = lrs, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items() if k in _GROUP}
        self.v = {k: np.zeros_like(v) for k, v in params.items() if k in _GROUP}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = getattr(self.lrs, _GROUP[k])
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def subset(self, keep):
        for k in self.m:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainResult:
    road: SurfelCloud
    env: GaussianCloud
    log: list
    road_params: dict
    env_params: dict


def _check_finite(params, which):
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite {which} parameter {k}", term=f"{which}.{k}")


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def save_snapshot(out_dir, tag, road, env, sdf_path=None):
    from .fileio import write_gaussians_ply, write_surfels_ply

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_surfels_ply(out_dir / f"road_{tag}.ply", road)
    write_gaussians_ply(out_dir / f"env_{tag}.ply", env)
    if sdf_path is not None:
        # keep the reference relative when the checkpoint sits inside the run directory
        sdf_path = Path(sdf_path)
        if sdf_path.resolve().is_relative_to(out_dir.resolve()):
            sdf_path = sdf_path.resolve().relative_to(out_dir.resolve())
    meta = {"road": f"road_{tag}.ply", "env": f"env_{tag}.ply",
            "sdf": None if sdf_path is None else sdf_path.as_posix()}
    (out_dir / f"snapshot_{tag}.json").write_text(json.dumps(meta, indent=2) + "\n")


def train(road_init: SemanticPointCloud, env_init: SemanticPointCloud, sdf, views, cfg: TrainConfig,
          out_dir=None, sdf_path=None, progress=None) -> TrainResult:
    """Optimise both layers against ``views``; deterministic for a given ``cfg.seed``."""
    if len(road_init) == 0 or len(env_init) == 0:
        raise ValueError("road and environment initial clouds must be nonempty")
    if not views:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(cfg.seed)
    road_p = init_road(road_init, sdf, cfg)
    env_p = init_env(env_init, cfg)
    opt_r = Adam(road_p, cfg.lr)
    opt_e = Adam(env_p, cfg.lr)
    bands = [L.banded_boundary(v.mask, cfg.band_width) for v in views]
    log = []
    for it in range(1, cfg.iterations + 1):
        vi = int(rng.integers(len(views)))
        total, parts, grads = evaluate_objective(road_p, env_p, views[vi], sdf, cfg, bands[vi])
        log.append({"iteration": it, **parts, "total": total})
        opt_r.step(road_p, grads["road"])
        opt_e.step(env_p, grads["env"])
        _check_finite(road_p, "road")
        _check_finite(env_p, "env")
        if cfg.prune and it % cfg.prune_interval == 0:
            for p, opt in ((road_p, opt_r), (env_p, opt_e)):
                keep = expit(p["logit_opacities"]) >= PRUNE_THRESHOLD
                if not keep.all():
                    for k in p:
                        p[k] = p[k][keep]
                    opt.subset(keep)
        if out_dir is not None and cfg.snapshot_interval and it % cfg.snapshot_interval == 0:
            save_snapshot(out_dir, f"{it:06d}", road_cloud(road_p), env_cloud(env_p, cfg), sdf_path)
        if progress is not None:
            progress(it, log[-1])
    road, env = road_cloud(road_p), env_cloud(env_p, cfg)
    if out_dir is not None:
        save_snapshot(out_dir, "final", road, env, sdf_path)
        write_log_csv(Path(out_dir) / "loss_log.csv", log)
    return TrainResult(road, env, log, road_p, env_p)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def render_composite(road, env, cam, mode="smooth", s_sigma=DEFAULT_S_SIGMA, background=None):
    return composite(render_layer(road, cam), render_layer(env, cam), mode, s_sigma, background)


def evaluate(road, env, views, mode="smooth", s_sigma=DEFAULT_S_SIGMA, background=None):
    """Per-view PSNR/SSIM rows plus their arithmetic means."""
    rows = []
    for k, v in enumerate(views):
        img = np.clip(render_composite(road, env, v.camera, mode, s_sigma, background).image, 0.0, 1.0)
        rows.append({"view": k, "psnr": L.psnr(img, v.image), "ssim": L.ssim(img, v.image)})
    mean = {"view": "mean",
            "psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
            "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")}
    return rows, mean
