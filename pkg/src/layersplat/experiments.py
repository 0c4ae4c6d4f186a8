"""Scaled-down experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import pointcloud as pcd
from . import sdf as S
from . import synthetic
from .rasterizer import render_layer
from .trainer import TrainConfig, View, evaluate, train

# ---------------------------------------------------------------------------
# SDF recovery on a sinusoidal strip
# ---------------------------------------------------------------------------


def sinusoid_strip(n=20000, amplitude=0.2, length=10.0, width=4.0, seed=0):
    """Points on z = a sin(x) over a strip, with the analytic unit normals."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform([-length / 2, -width / 2], [length / 2, width / 2], (n, 2))
    P = np.c_[xy, amplitude * np.sin(xy[:, 0])]
    normals = np.c_[-amplitude * np.cos(xy[:, 0]), np.zeros(n), np.ones(n)]
    return P, normals / np.linalg.norm(normals, axis=1, keepdims=True)


def sdf_strip(n=20000, amplitude=0.2, iterations=3000, batch=1024, width=128, k=50, radius=0.5,
              held_out=2000, seed=0):
    """Fit the road prior to a sinusoidal strip and score it against held-out samples."""
    t0 = time.perf_counter()
    P, true_n = sinusoid_strip(n, amplitude, seed=seed)
    normals, ok = S.estimate_normals(P, k)
    cos = np.abs(np.sum(normals[ok] * true_n[ok], axis=1))
    angle = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    samples = S.sample_offsurface(P, 4, radius, seed + 1, normals)
    model = S.fit_sdf(samples, iterations=iterations, batch=batch, width=width, seed=seed, lr_decay=0.1)
    # fresh offsets around a subset of the surface, labelled against the full cloud
    pick = np.random.default_rng(seed + 2).choice(n, held_out, replace=False)
    offsets = np.random.default_rng(seed + 3).uniform(-radius, radius, (held_out, 3))
    Q = P[pick] + offsets
    f, _ = model.query(Q)
    mae = float(np.mean(np.abs(f - S.eq5_distance(Q, P) * model.scale)))
    return {"heldout_mae": mae, "eikonal_residual": S.eikonal_residual(model, P[pick]),
            "normal_mean_deg": float(angle.mean()), "normal_max_deg": float(angle.max()),
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# training on a synthetic preset
# ---------------------------------------------------------------------------


@dataclass
class PreparedScene:
    road: object
    env: object
    sdf: S.SdfModel
    train_views: list
    test_views: list


def prepare_scene(preset, seed=0, size=64, sky=1000, sdf_iterations=300, sdf_width=64):
    """Label the preset's point cloud from its training views, add a sky and fit the road prior."""
    sc = synthetic.make_preset(preset, size=size)
    train_views = [View(c, *sc.render(c)) for c in sc.train_cameras]
    test_views = [View(c, *sc.render(c)) for c in sc.test_cameras]
    labelled = pcd.label_points(sc.sample_points(seed), [v.camera for v in train_views],
                                [v.image for v in train_views], [v.mask for v in train_views])
    road, env = pcd.split(labelled)
    if sky:
        env = pcd.add_sky_sphere(env, sky, seed=seed)
    normals, _ = S.estimate_normals(road.positions, min(50, len(road) - 1))
    samples = S.sample_offsurface(road.positions, 4, 0.5, seed, normals)
    model = S.fit_sdf(samples, iterations=sdf_iterations, batch=512, width=sdf_width, seed=seed)
    return PreparedScene(road, env, model, train_views, test_views)


def sdf_ablation(seeds=range(5), lambdas=(1.0, 0.0), iterations=1000, preset="road-corridor"):
    """Held-out PSNR per (seed, lambda_sdf); the prior is fitted once per seed and shared."""
    rows = []
    for seed in seeds:
        scene = prepare_scene(preset, seed=seed)
        for lam in lambdas:
            cfg = TrainConfig(iterations=iterations, seed=seed)
            cfg.weights.sdf = lam
            t0 = time.perf_counter()
            res = train(scene.road, scene.env, scene.sdf, scene.train_views, cfg)
            _, test = evaluate(res.road, res.env, scene.test_views)
            _, fit = evaluate(res.road, res.env, scene.train_views)
            rows.append({"seed": seed, "lambda_sdf": lam, "test_psnr": test["psnr"],
                         "test_ssim": test["ssim"], "train_psnr": fit["psnr"],
                         "seconds": time.perf_counter() - t0})
    return rows


def road_transmittance_error(env, views):
    """Mean over views of mean |T_e - M| on that view's road pixels."""
    errs = []
    for v in views:
        road = v.mask > 0
        if road.any():
            T = render_layer(env, v.camera).transmittance
            errs.append(float(np.mean(np.abs(T[road] - 1.0))))
    return float(np.mean(errs))


def transmittance_check(lambda_tran=0.1, iterations=2000, seed=0, sky=1000, preset="plane"):
    """Environment transmittance on road pixels before and after training."""
    from .trainer import env_cloud, init_env

    scene = prepare_scene(preset, seed=seed, sky=sky)
    cfg = TrainConfig(iterations=iterations, seed=seed)
    cfg.weights.tran = lambda_tran
    before = road_transmittance_error(env_cloud(init_env(scene.env, cfg), cfg), scene.train_views)
    t0 = time.perf_counter()
    res = train(scene.road, scene.env, scene.sdf, scene.train_views, cfg)
    after = road_transmittance_error(res.env, scene.train_views)
    _, fit = evaluate(res.road, res.env, scene.train_views)
    return {"lambda_tran": lambda_tran, "before": before, "after": after, "train_psnr": fit["psnr"],
            "seconds": time.perf_counter() - t0}
