"""Readers and writers: point/primitive PLY, camera JSON, PPM/PFM/PNG images, masks."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit

from . import sh as shlib
from .scene import Camera, GaussianCloud, SemanticPointCloud, SurfelCloud


class FormatError(ValueError):
    """A file exists but its contents are not what the reader expects."""


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _read_ply(path):
    try:
        return PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # plyfile raises a mix of types on malformed headers
        raise FormatError(f"{path}: unreadable PLY ({exc})") from exc


def _vertex(ply, path, required):
    if "vertex" not in ply:
        raise FormatError(f"{path}: no vertex element")
    v = ply["vertex"]
    names = set(v.data.dtype.names)
    missing = [r for r in required if r not in names]
    if missing:
        raise FormatError(f"{path}: missing properties {missing}")
    return v.data


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def write_points_ply(path, pc: SemanticPointCloud, ascii=False):
    n = len(pc)
    arr = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("semantic", "u1")])
    for k, name in enumerate("xyz"):
        arr[name] = pc.positions[:, k]
    rgb = to_uint8(pc.colors)
    for k, name in enumerate(("red", "green", "blue")):
        arr[name] = rgb[:, k]
    arr["semantic"] = pc.labels
    PlyData([PlyElement.describe(arr, "vertex")], text=ascii, byte_order="<").write(str(path))


def read_points_ply(path) -> SemanticPointCloud:
    """Read x/y/z (+ optional red/green/blue, semantic). Missing colours read as grey."""
    d = _vertex(_read_ply(path), path, ["x", "y", "z"])
    pos = np.stack([d["x"], d["y"], d["z"]], axis=1).astype(np.float64)
    names = d.dtype.names
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([d["red"], d["green"], d["blue"]], axis=1).astype(np.float64) / 255.0
    else:
        cols = None
    labels = np.asarray(d["semantic"], dtype=np.uint8) if "semantic" in names else None
    try:
        return SemanticPointCloud(pos, cols, labels)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# primitives (3DGS-style layout)
# ---------------------------------------------------------------------------


def _sh_fields(sh):
    n, k, _ = sh.shape
    dc = sh[:, 0, :]
    rest = np.transpose(sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (k - 1))
    return dc, rest


def _sh_from_fields(d, names):
    n = len(d)
    dc = np.stack([d[f"f_dc_{c}"] for c in range(3)], axis=1).astype(np.float64)
    rest_names = sorted((x for x in names if x.startswith("f_rest_")), key=lambda s: int(s[7:]))
    k = 1 + len(rest_names) // 3
    if len(rest_names) % 3 or k not in (1, 4, 9):
        raise FormatError(f"unsupported number of SH coefficients: {len(rest_names)} f_rest fields")
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = dc
    if k > 1:
        rest = np.stack([d[x] for x in rest_names], axis=1).astype(np.float64)
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return sh


def _write_struct(path, cols):
    n = len(cols[0][1]) if cols else 0
    arr = np.empty(n, dtype=[(name, "<f4") for name, _ in cols])
    for name, values in cols:
        arr[name] = values
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<").write(str(path))


def write_gaussians_ply(path, cloud: GaussianCloud):
    dc, rest = _sh_fields(cloud.sh)
    cols = [(a, cloud.means[:, i]) for i, a in enumerate("xyz")]
    cols += [(f"f_dc_{c}", dc[:, c]) for c in range(3)]
    cols += [(f"f_rest_{c}", rest[:, c]) for c in range(rest.shape[1])]
    cols.append(("opacity", logit(cloud.opacities)))
    cols += [(f"scale_{c}", np.log(cloud.scales[:, c])) for c in range(3)]
    cols += [(f"rot_{c}", cloud.rotations[:, c]) for c in range(4)]
    _write_struct(path, cols)


def read_gaussians_ply(path) -> GaussianCloud:
    req = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"] + [f"scale_{c}" for c in range(3)] \
        + [f"rot_{c}" for c in range(4)]
    d = _vertex(_read_ply(path), path, req)
    f64 = lambda name: np.asarray(d[name], dtype=np.float64)  # noqa: E731
    return GaussianCloud(
        np.stack([f64(a) for a in "xyz"], axis=1),
        np.stack([f64(f"rot_{c}") for c in range(4)], axis=1),
        np.exp(np.stack([f64(f"scale_{c}") for c in range(3)], axis=1)),
        expit(f64("opacity")),
        _sh_from_fields(d, d.dtype.names),
    )


def write_surfels_ply(path, cloud: SurfelCloud):
    dc, rest = _sh_fields(cloud.sh)
    cols = [(a, cloud.centers[:, i]) for i, a in enumerate("xyz")]
    cols += [(f"f_dc_{c}", dc[:, c]) for c in range(3)]
    cols += [(f"f_rest_{c}", rest[:, c]) for c in range(rest.shape[1])]
    cols.append(("opacity", logit(cloud.opacities)))
    cols += [(f"scale_{c}", np.log(cloud.scales[:, c])) for c in range(2)]
    cols += [(f"tu_{c}", cloud.tangent_u[:, c]) for c in range(3)]
    cols += [(f"tv_{c}", cloud.tangent_v[:, c]) for c in range(3)]
    _write_struct(path, cols)


def read_surfels_ply(path) -> SurfelCloud:
    req = ["x", "y", "z", "f_dc_0", "opacity", "scale_0", "scale_1"] + [f"tu_{c}" for c in range(3)] \
        + [f"tv_{c}" for c in range(3)]
    d = _vertex(_read_ply(path), path, req)
    f64 = lambda name: np.asarray(d[name], dtype=np.float64)  # noqa: E731
    return SurfelCloud(
        np.stack([f64(a) for a in "xyz"], axis=1),
        np.stack([f64(f"tu_{c}") for c in range(3)], axis=1),
        np.stack([f64(f"tv_{c}") for c in range(3)], axis=1),
        np.exp(np.stack([f64(f"scale_{c}") for c in range(2)], axis=1)),
        expit(f64("opacity")),
        _sh_from_fields(d, d.dtype.names),
    )


def ply_kind(path):
    """'surfel', 'gaussian' or 'points' according to the vertex properties present."""
    names = set(_vertex(_read_ply(path), path, ["x", "y", "z"]).dtype.names)
    if {"tu_0", "tv_0"} <= names:
        return "surfel"
    if {"rot_0", "scale_0", "opacity"} <= names:
        return "gaussian"
    return "points"


def points_to_gaussians(pc: SemanticPointCloud, scale=0.05, opacity=0.9) -> GaussianCloud:
    """Render-ready isotropic Gaussians for a bare point cloud (viewing aid)."""
    n = len(pc)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(pc.positions, rot, np.full((n, 3), scale), np.full(n, opacity),
                         shlib.rgb_to_sh(pc.colors)[:, None, :])


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def write_cameras(path, cameras, extras=None):
    """JSON list of camera dicts; ``extras`` is an optional list of dicts merged per camera."""
    items = []
    for k, cam in enumerate(cameras):
        d = cam.to_dict()
        if extras is not None:
            d.update(extras[k])
        items.append(d)
    Path(path).write_text(json.dumps(items, indent=2) + "\n")


def read_camera_entries(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a list of cameras")
    return data


def read_cameras(path):
    out = []
    for k, d in enumerate(read_camera_entries(path)):
        try:
            out.append(Camera.from_dict(d))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: camera {k}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_ppm(path, img):
    img = to_uint8(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _tokens(data, count):
    """Split the first ``count`` whitespace tokens of a Netpbm-style header."""
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        toks.append(data[start:pos])
    return toks, pos + 1


def read_ppm(path):
    data = Path(path).read_bytes()
    toks, off = _tokens(data, 4)
    if toks[0] != b"P6" or int(toks[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(toks[1]), int(toks[2])
    body = data[off:off + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, arr):
    """Little-endian PFM; rows stored bottom-to-top as the format prescribes."""
    a = np.asarray(arr, dtype="<f4")
    tag = b"PF" if a.ndim == 3 else b"Pf"
    h, w = a.shape[:2]
    header = tag + f"\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path):
    data = Path(path).read_bytes()
    toks, off = _tokens(data, 4)
    if toks[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    w, h, scale = int(toks[1]), int(toks[2]), float(toks[3])
    ch = 3 if toks[0] == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dt, w * h * ch, off).astype(np.float32)
    a = a.reshape(h, w, ch) if ch == 3 else a.reshape(h, w)
    return a[::-1].copy()


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(str(path), optimize=False)


def read_image(path):
    """RGB float image in [0, 1] from PNG/PPM or anything Pillow opens."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc


def write_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)).save(str(path))


def read_mask(path):
    """Binary grid from a grayscale PNG/PGM; nonzero is road."""
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L")) != 0).astype(np.uint8)
    except OSError as exc:
        raise FormatError(f"{path}: unreadable mask ({exc})") from exc
