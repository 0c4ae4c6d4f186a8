"""Analytic synthetic driving scenes: ground plane with a road strip, boxes, sky.

Everything is ray-cast exactly, so images, masks and points are ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Camera, Label, SemanticPointCloud

PRESETS = ("plane", "road-corridor", "boxes")


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple


@dataclass
class SyntheticScene:
    road_half_width: float = 2.0
    ground_x: tuple = (-5.0, 30.0)
    ground_y: tuple = (-10.0, 10.0)
    boxes: list = field(default_factory=list)
    train_cameras: list = field(default_factory=list)
    test_cameras: list = field(default_factory=list)
    n_points: int = 800

    # -- shading -----------------------------------------------------------

    def ground_color(self, x, y):
        road = np.abs(y) <= self.road_half_width
        checker = (np.floor(x) + np.floor(y)) % 2
        asphalt = 0.28 + 0.06 * checker
        lane = (np.abs(y) < 0.12) & ((np.floor(x / 1.5) % 2) == 0)
        c_road = np.stack([asphalt, asphalt, asphalt + 0.02], axis=-1)
        c_road[lane] = (0.9, 0.9, 0.85)
        tile = (np.floor(2 * x) + np.floor(2 * y)) % 2
        c_side = np.stack([0.55 + 0.1 * tile, 0.5 + 0.08 * tile, 0.4 + 0.05 * tile], axis=-1)
        return np.where(road[..., None], c_road, c_side), road

    @staticmethod
    def sky_color(dirs):
        e = np.clip(dirs[..., 2], 0.0, 1.0)[..., None]
        return np.array([0.8, 0.87, 0.97]) + e * (np.array([0.35, 0.55, 0.9]) - np.array([0.8, 0.87, 0.97]))

    @staticmethod
    def box_color(box, p, normal_axis):
        base = np.asarray(box.color, dtype=np.float64)
        u = p[..., (normal_axis + 1) % 3]
        v = p[..., (normal_axis + 2) % 3]
        stripe = ((np.floor(2 * u) + np.floor(2 * v)) % 2)[..., None]
        return np.clip(base * (0.8 + 0.3 * stripe), 0.0, 1.0)

    # -- ray casting -------------------------------------------------------

    def cast(self, origins, dirs):
        """Nearest hit per ray: (t, color, label, hit). Misses show sky (label SKY)."""
        n = len(dirs)
        t_best = np.full(n, np.inf)
        color = self.sky_color(dirs)
        label = np.full(n, Label.SKY, dtype=np.uint8)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origins[:, 2] / dirs[:, 2]
        p = origins + t[:, None] * dirs
        ok = (t > 1e-6) & (p[:, 0] >= self.ground_x[0]) & (p[:, 0] <= self.ground_x[1]) \
            & (p[:, 1] >= self.ground_y[0]) & (p[:, 1] <= self.ground_y[1])
        gc, road = self.ground_color(p[:, 0], p[:, 1])
        t_best = np.where(ok, t, t_best)
        color = np.where(ok[:, None], gc, color)
        label = np.where(ok, np.where(road, Label.ROAD, Label.NON_ROAD), label).astype(np.uint8)
        for box in self.boxes:
            lo, hi = np.asarray(box.lo), np.asarray(box.hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - origins) / dirs
                t2 = (hi - origins) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            axis = np.nanargmax(np.minimum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-6) & (tmin < t_best)
            if not hit.any():
                continue
            ph = origins[hit] + tmin[hit, None] * dirs[hit]
            bc = np.stack([self.box_color(box, ph[k], axis[hit][k]) for k in range(len(ph))])
            t_best[hit] = tmin[hit]
            color[hit] = bc
            label[hit] = Label.NON_ROAD
        return t_best, color, label, np.isfinite(t_best)

    def render(self, cam: Camera, supersample=2):
        """Ground-truth image (anti-aliased by supersampling) and road mask (centre rays)."""
        H, W = cam.shape
        offs = (np.arange(supersample) + 0.5) / supersample
        acc = np.zeros((H, W, 3))
        for oy in offs:
            for ox in offs:
                acc += self._shade(cam, ox, oy)[0]
        _, lab = self._shade(cam, 0.5, 0.5)
        return acc / supersample**2, (lab == Label.ROAD).astype(np.uint8)

    def _shade(self, cam, ox, oy):
        H, W = cam.shape
        j, i = np.meshgrid(np.arange(W) + ox, np.arange(H) + oy)
        d = np.stack([(j - cam.cx) / cam.fx, (i - cam.cy) / cam.fy, np.ones_like(j)], axis=-1).reshape(-1, 3)
        d = d @ cam.R
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(cam.center, d.shape)
        _, c, lab, _ = self.cast(o, d)
        return c.reshape(H, W, 3), lab.reshape(H, W)

    def sample_points(self, seed=0):
        """Surface points seen by the training cameras (random sub-pixel rays)."""
        rng = np.random.default_rng(seed)
        cams = self.train_cameras
        per = int(np.ceil(self.n_points / len(cams)))
        pos, col, lab = [], [], []
        for cam in cams:
            # oversample then keep the first hits so every camera contributes `per` points
            uv = rng.uniform([0, 0], [cam.width, cam.height], size=(4 * per, 2))
            d = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], 1)
            d = d @ cam.R
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            o = np.broadcast_to(cam.center, d.shape)
            t, c, lb, hit = self.cast(o, d)
            k = np.flatnonzero(hit)[:per]
            pos.append(o[k] + t[k, None] * d[k])
            col.append(c[k])
            lab.append(lb[k])
        pc = SemanticPointCloud(np.concatenate(pos), np.concatenate(col), np.concatenate(lab))
        return pc.subset(np.arange(min(self.n_points, len(pc))))


def _cam(eye, target, size, fx):
    return Camera.look_at(eye, target, width=size, height=size, fx=fx, near=0.05, far=500.0)


def make_preset(name, size=64, fx=None) -> SyntheticScene:
    fx = fx if fx is not None else 0.75 * size
    if name == "plane":
        sc = SyntheticScene(road_half_width=2.0, n_points=600)
        sc.train_cameras = [_cam((x, 0.0, 1.6), (x + 10.0, 0.0, 0.0), size, fx) for x in (0.0, 1.5, 3.0, 4.5)]
        sc.test_cameras = [_cam((2.25, 0.5, 1.6), (12.25, 0.5, 0.0), size, fx)]
    elif name == "boxes":
        sc = SyntheticScene(road_half_width=2.0, n_points=800)
        sc.boxes = [Box((8.0, 3.0, 0.0), (10.0, 5.0, 2.0), (0.75, 0.25, 0.2)),
                    Box((12.0, -5.5, 0.0), (14.0, -3.0, 2.5), (0.2, 0.5, 0.75)),
                    Box((18.0, 2.5, 0.0), (19.5, 4.5, 1.5), (0.3, 0.7, 0.3))]
        sc.train_cameras = [_cam((x, 0.0, 1.6), (x + 10.0, 0.0, 0.5), size, fx) for x in (0.0, 1.5, 3.0, 4.5)]
        sc.test_cameras = [_cam((2.25, 0.5, 1.6), (12.25, 0.5, 0.5), size, fx)]
    elif name == "road-corridor":
        sc = SyntheticScene(road_half_width=3.5, ground_x=(-5.0, 40.0), ground_y=(-6.0, 6.0), n_points=1200)
        sc.boxes = [Box((-5.0, 6.0, 0.0), (40.0, 6.5, 4.0), (0.7, 0.6, 0.45)),
                    Box((-5.0, -6.5, 0.0), (40.0, -6.0, 4.0), (0.5, 0.55, 0.65)),
                    Box((40.0, -6.5, 0.0), (41.0, 6.5, 6.0), (0.6, 0.35, 0.3))]
        xs = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
        sc.train_cameras = [_cam((x, 0.0, 1.6), (x + 10.0, 0.0, 0.3), size, fx) for x in xs]
        sc.test_cameras = [c.translated((0.0, 1.0, 0.0)) for c in sc.train_cameras[:5]]
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return sc


def generate(preset, out_dir, seed=0, size=64):
    """Write points.ply, cameras.json, images/NNN.png and masks/NNN.png for a preset."""
    from .fileio import write_cameras, write_mask, write_png, write_points_ply

    sc = make_preset(preset, size=size)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cams = sc.train_cameras + sc.test_cameras
    splits = ["train"] * len(sc.train_cameras) + ["test"] * len(sc.test_cameras)
    for k, cam in enumerate(cams):
        img, mask = sc.render(cam)
        write_png(out / "images" / f"{k:03d}.png", img)
        write_mask(out / "masks" / f"{k:03d}.png", mask)
    write_cameras(out / "cameras.json", cams,
                  [{"split": s, "image": f"images/{k:03d}.png", "mask": f"masks/{k:03d}.png"}
                   for k, s in enumerate(splits)])
    write_points_ply(out / "points.ply", sc.sample_points(seed))
    return sc
