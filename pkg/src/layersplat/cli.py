"""``layersplat`` command line: gen-scene, prep-pcd, fit-sdf, render, train, eval.

Failures print one line ``error code=<code> path=<path> reason=<reason>`` to
stderr. Exit status: 0 success, 2 bad input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import DivergenceError, default_threads
from . import fileio as fio

EXIT_BAD_INPUT = 2
EXIT_DIVERGENCE = 3
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg")


class CliError(Exception):
    def __init__(self, code, path, reason, status=EXIT_BAD_INPUT):
        super().__init__(reason)
        self.code, self.path, self.reason, self.status = code, path, reason, status


def _clean(text):
    return re.sub(r"\s+", " ", str(text)).strip()


def _need_file(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", p, f"{what} not found")
    return p


def _find_image(directory, k, what="image"):
    d = Path(directory)
    for suf in IMAGE_SUFFIXES:
        p = d / f"{k:03d}{suf}"
        if p.is_file():
            return p
    raise CliError("missing_file", d / f"{k:03d}.png", f"{what} for camera {k} not found")


def _camera_ref(spec):
    """'cams.json[3]' -> (path, 3); a bare path means index 0."""
    m = re.fullmatch(r"(.*)\[(\d+)\]", spec)
    return (Path(m.group(1)), int(m.group(2))) if m else (Path(spec), 0)


def _load_views(cameras_path, images_dir, masks_dir=None, split=None):
    from .trainer import View

    entries = fio.read_camera_entries(_need_file(cameras_path, "camera file"))
    cams = fio.read_cameras(cameras_path)
    views, idx = [], []
    for k, (cam, e) in enumerate(zip(cams, entries)):
        if split is not None and e.get("split", "train") != split:
            continue
        img = fio.read_image(_find_image(images_dir, k))
        mask = fio.read_mask(_find_image(masks_dir, k, "mask")) if masks_dir else np.zeros(cam.shape)
        try:
            views.append(View(cam, img, mask))
        except ValueError as exc:
            raise CliError("bad_format", _find_image(images_dir, k), _clean(exc)) from exc
        idx.append(k)
    return views, idx


def _read_layer(path, kind_hint):
    """Primitives from any supported PLY; bare point clouds become small Gaussians."""
    from .scene import GaussianCloud, SurfelCloud

    if path is None:
        return SurfelCloud.empty() if kind_hint == "surfel" else GaussianCloud.empty()
    p = _need_file(path, "layer PLY")
    kind = fio.ply_kind(p)
    if kind == "surfel":
        return fio.read_surfels_ply(p)
    if kind == "gaussian":
        return fio.read_gaussians_ply(p)
    return fio.points_to_gaussians(fio.read_points_ply(p))


def _write_tsv(rows, path=None, stream=None):
    cols = list(rows[0].keys())
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    text = "\n".join(lines) + "\n"
    (stream or sys.stdout).write(text)
    if path is not None:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(a):
    from .synthetic import generate

    generate(a.preset, a.out, seed=a.seed, size=a.size)
    print(f"wrote {a.preset} scene to {a.out}")


def prep_pointclouds(points, cameras, images, masks, sky=0, downsample=None, seed=0, sky_color="constant"):
    from . import pointcloud as pcd

    pc = fio.read_points_ply(_need_file(points, "point cloud"))
    views, _ = _load_views(cameras, images, masks, split="train")
    if not views:
        raise CliError("bad_value", cameras, "no training cameras")
    if downsample:
        pc = pcd.downsample(pc, downsample, seed)
    try:
        labeled = pcd.label_points(pc, [v.camera for v in views], [v.image for v in views],
                                   [v.mask for v in views])
        road, env = pcd.split(labeled)
    except ValueError as exc:
        raise CliError("bad_value", points, _clean(exc)) from exc
    env = pcd.add_sky_sphere(env, sky, sky_color, seed) if sky else env
    return road, env


def cmd_prep_pcd(a):
    road, env = prep_pointclouds(a.points, a.cameras, a.images, a.masks, a.sky, a.downsample, a.seed,
                                 a.sky_color)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_points_ply(out / "road.ply", road)
    fio.write_points_ply(out / "env.ply", env)
    print(f"road\t{len(road)}\nenv\t{len(env)}")


def fit_road_sdf(road_pc, iters, k=50, radius=0.5, per_point=4, seed=0, batch=4096, width=128, lr=1e-3):
    from . import sdf as S

    P = road_pc.positions
    kk = min(k, len(P) - 1)
    if kk < 3:
        raise CliError("bad_value", "road", f"too few road points ({len(P)}) for normal estimation")
    normals, _ = S.estimate_normals(P, kk)
    samples = S.sample_offsurface(P, per_point, radius, seed, normals)
    model = S.fit_sdf(samples, iterations=iters, batch=batch, width=width, seed=seed, lr=lr, lr_decay=0.1)
    held = S.sample_offsurface(P, 1, radius, seed + 1)
    off = ~held.is_surface
    f, _ = model.query(held.positions[off])
    mae = float(np.mean(np.abs(f - held.distances[off] * model.scale)))
    return model, mae, S.eikonal_residual(model, P)


def cmd_fit_sdf(a):
    road = fio.read_points_ply(_need_file(a.road, "road PLY"))
    model, mae, eik = fit_road_sdf(road, a.iters, a.k, a.radius, a.per_point, a.seed, a.batch, a.width, a.lr)
    model.save(a.out)
    print(f"heldout_mae\t{mae:.6f}\neikonal_residual\t{eik:.6f}")


def cmd_render(a):
    from .compositor import composite
    from .rasterizer import render_layer

    cam_path, idx = _camera_ref(a.camera)
    cams = fio.read_cameras(_need_file(cam_path, "camera file"))
    if idx >= len(cams):
        raise CliError("bad_value", cam_path, f"camera index {idx} out of range ({len(cams)} cameras)")
    cam = cams[idx]
    road = _read_layer(a.road, "surfel")
    env = _read_layer(a.env, "gaussian")
    rr, er = render_layer(road, cam), render_layer(env, cam)
    comp = composite(rr, er, a.mode, a.s_sigma, a.background)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fio.write_ppm(out, np.clip(comp.image, 0.0, 1.0))
    if a.dump_aux:
        stem = out.with_suffix("")
        aux = {"depth": comp.depth, "depth_road": rr.depth, "depth_env": er.depth,
               "T_road": rr.transmittance, "T_env": er.transmittance,
               "lambda_road": comp.lambda_road, "lambda_env": comp.lambda_env, "delta": comp.delta}
        for name, arr in aux.items():
            fio.write_pfm(f"{stem}_{name}.pfm", arr)
    print(f"wrote {out}")


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def cmd_train(a):
    from .sdf import SdfModel
    from .trainer import TrainConfig, evaluate, train

    cfg_path = _need_file(a.config, "config")
    try:
        conf = json.loads(cfg_path.read_text())
        tcfg = TrainConfig.from_dict(conf.get("train", {}))
    except json.JSONDecodeError as exc:
        raise CliError("bad_format", cfg_path, _clean(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise CliError("bad_value", cfg_path, _clean(exc)) from exc
    base = cfg_path.parent
    data = conf.get("data", {})
    if "dir" in data:
        d = _resolve(base, data["dir"])
        data = {"points": d / "points.ply", "cameras": d / "cameras.json", "images": d / "images",
                "masks": d / "masks", **{k: v for k, v in data.items() if k != "dir"}}
    try:
        paths = {k: _resolve(base, data[k]) for k in ("points", "cameras", "images", "masks")}
    except KeyError as exc:
        raise CliError("bad_value", cfg_path, f"data section lacks {exc}") from exc
    prep = conf.get("prep", {})
    road_pc, env_pc = prep_pointclouds(paths["points"], paths["cameras"], paths["images"], paths["masks"],
                                       prep.get("sky", 0), prep.get("downsample"), prep.get("seed", tcfg.seed),
                                       prep.get("sky_color", "constant"))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sconf = conf.get("sdf", {})
    if "path" in sconf:
        sdf_path = _resolve(base, sconf["path"])
        try:
            sdf = SdfModel.load(_need_file(sdf_path, "SDF checkpoint"))
        except ValueError as exc:
            raise CliError("bad_format", sdf_path, _clean(exc)) from exc
    else:
        sdf, mae, eik = fit_road_sdf(road_pc, sconf.get("iters", 1000), sconf.get("k", 50),
                                     sconf.get("radius", 0.5), sconf.get("per_point", 4),
                                     sconf.get("seed", tcfg.seed), sconf.get("batch", 1024),
                                     sconf.get("width", 128), sconf.get("lr", 1e-3))
        sdf_path = out / "model.sdf1"
        sdf.save(sdf_path)
        print(f"sdf\theldout_mae={mae:.6f}\teikonal_residual={eik:.6f}")
    views, _ = _load_views(paths["cameras"], paths["images"], paths["masks"], split="train")
    fio.write_points_ply(out / "road_init.ply", road_pc)
    fio.write_points_ply(out / "env_init.ply", env_pc)
    (out / "config.json").write_text(json.dumps(tcfg.to_dict(), indent=2) + "\n")
    res = train(road_pc, env_pc, sdf, views, tcfg, out_dir=out, sdf_path=sdf_path)
    rows = []
    for split in ("train", "test"):
        sv, idx = _load_views(paths["cameras"], paths["images"], paths["masks"], split=split)
        if not sv:
            continue
        per, mean = evaluate(res.road, res.env, sv, tcfg.mode, tcfg.s_sigma, np.asarray(tcfg.background))
        rows += [{"split": split, "view": str(idx[r["view"]]), "psnr": r["psnr"], "ssim": r["ssim"]} for r in per]
        rows.append({"split": split, "view": "mean", "psnr": mean["psnr"], "ssim": mean["ssim"]})
    _write_tsv(rows, out / "metrics.tsv")


def cmd_eval(a):
    from .trainer import evaluate

    models = Path(a.models)
    road = _read_layer(models / "road_final.ply", "surfel")
    env = _read_layer(models / "env_final.ply", "gaussian")
    views, idx = _load_views(a.views, a.gt, None, split=a.split)
    if not views:
        raise CliError("bad_value", a.views, "no cameras selected")
    per, mean = evaluate(road, env, views, a.mode, a.s_sigma, a.background)
    rows = [{"view": str(idx[r["view"]]), "psnr": r["psnr"], "ssim": r["ssim"]} for r in per]
    rows.append({"view": "mean", "psnr": mean["psnr"], "ssim": mean["ssim"]})
    _write_tsv(rows, a.out if a.out else models / "eval.tsv")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _rgb(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background must be r,g,b")
    return np.array(vals)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on rasterizer worker threads")
    common.add_argument("--seed", type=int, default=0)

    p = argparse.ArgumentParser(prog="layersplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="write a synthetic fixture scene")
    s.add_argument("--preset", required=True, choices=("plane", "road-corridor", "boxes"))
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("prep-pcd", parents=[common], help="label and split a point cloud")
    s.add_argument("--points", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--sky", type=int, default=0)
    s.add_argument("--sky-color", choices=("constant", "texture"), default="constant")
    s.add_argument("--downsample", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_pcd)

    s = sub.add_parser("fit-sdf", parents=[common], help="fit the road SDF prior")
    s.add_argument("--road", required=True)
    s.add_argument("--iters", type=int, default=20000)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--per-point", type=int, default=4)
    s.add_argument("--batch", type=int, default=4096)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_sdf)

    s = sub.add_parser("render", parents=[common], help="render and composite both layers")
    s.add_argument("--road", default=None)
    s.add_argument("--env", default=None)
    s.add_argument("--camera", required=True, help="cams.json[i]")
    s.add_argument("--mode", choices=("hard", "smooth"), default="smooth")
    s.add_argument("--s-sigma", type=float, default=10.0)
    s.add_argument("--background", type=_rgb, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-aux", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train both layers from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of trained layers")
    s.add_argument("--models", required=True)
    s.add_argument("--views", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--split", default=None, help="only cameras with this split tag")
    s.add_argument("--mode", choices=("hard", "smooth"), default="smooth")
    s.add_argument("--s-sigma", type=float, default=10.0)
    s.add_argument("--background", type=_rgb, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    from .rasterizer import set_threads

    set_threads(args.threads if args.threads is not None else default_threads())
    try:
        args.func(args)
    except CliError as e:
        print(f"error code={e.code} path={e.path} reason={_clean(e.reason)}", file=sys.stderr)
        return e.status
    except DivergenceError as e:
        print(f"error code=divergence path={getattr(args, 'out', '-')} reason={_clean(e)} term={e.term}",
              file=sys.stderr)
        return EXIT_DIVERGENCE
    except FileNotFoundError as e:
        print(f"error code=missing_file path={e.filename} reason=not found", file=sys.stderr)
        return EXIT_BAD_INPUT
    except fio.FormatError as e:
        path, _, reason = str(e).partition(": ")
        print(f"error code=bad_format path={path if reason else '-'} reason={_clean(reason or path)}",
              file=sys.stderr)
        return EXIT_BAD_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
