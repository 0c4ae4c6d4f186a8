"""Implicit road surface: training data, an MLP signed distance field and its queries.

The network is evaluated in numpy. The input gradient ``grad f`` is carried
alongside the activations in forward mode (three tangent streams), so the
normal and eikonal terms can themselves be differentiated by an ordinary
reverse pass through the combined value/tangent graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from . import DivergenceError

SOFTPLUS_BETA = 100.0
MAGIC = b"SDF1"


# ---------------------------------------------------------------------------
# normals and samples
# ---------------------------------------------------------------------------


def orient_normals(normals):
    """Flip each normal so z >= 0; horizontal normals get x >= 0, then y >= 0."""
    n = np.array(normals, dtype=np.float64)
    tol = 1e-9
    key = np.where(np.abs(n[:, 2]) > tol, n[:, 2],
                   np.where(np.abs(n[:, 0]) > tol, n[:, 0], n[:, 1]))
    n[key < 0] *= -1.0
    return n


def estimate_normals(positions, k=50, rank_tol=1e-6, chunk=4096):
    """Per-point normals from the SVD of the k-neighbourhood (the point itself included).

    Returns ``(normals, valid)``. Points whose neighbourhood has rank < 2
    (a repeated point or a line) get a NaN normal and ``valid = False``.
    """
    P = np.asarray(positions, dtype=np.float64)
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(P) <= k:
        raise ValueError(f"need more than k={k} points, got {len(P)}")
    _, idx = cKDTree(P).query(P, k=k)
    normals = np.empty_like(P)
    valid = np.empty(len(P), dtype=bool)
    for s in range(0, len(P), chunk):
        X = P[idx[s:s + chunk]]
        X = X - X.mean(axis=1, keepdims=True)
        _, sv, vt = np.linalg.svd(X, full_matrices=False)
        normals[s:s + chunk] = vt[:, -1, :]
        valid[s:s + chunk] = sv[:, 1] > rank_tol * np.maximum(sv[:, 0], 1e-300)
    normals = orient_normals(normals)
    normals[~valid] = np.nan
    return normals, valid


def eq5_distance(queries, surface):
    """Signed distance label: sign of the height above the nearest surface point times its distance."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    S = np.asarray(surface, dtype=np.float64)
    dist, idx = cKDTree(S).query(Q, k=1)
    return np.sign(Q[:, 2] - S[idx, 2]) * dist


@dataclass(frozen=True)
class SdfSample:
    position: np.ndarray
    distance: float
    is_surface: bool
    normal: np.ndarray | None


@dataclass(eq=False)
class SdfSamples:
    """Struct-of-arrays training set in world units. ``normals`` is NaN where absent."""

    positions: np.ndarray
    distances: np.ndarray
    is_surface: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(n)
        self.is_surface = np.asarray(self.is_surface, dtype=bool).reshape(n)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(n, 3)
        if np.any(self.distances[self.is_surface] != 0):
            raise ValueError("surface samples must carry distance 0")
        if np.any(~np.isnan(self.normals[~self.is_surface])):
            raise ValueError("only surface samples may carry a normal")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> SdfSample:
        nrm = self.normals[i]
        return SdfSample(self.positions[i], float(self.distances[i]), bool(self.is_surface[i]),
                         None if np.isnan(nrm).any() else nrm.copy())

    @classmethod
    def from_list(cls, samples):
        return cls(
            np.array([s.position for s in samples], dtype=np.float64).reshape(-1, 3),
            np.array([s.distance for s in samples], dtype=np.float64),
            np.array([s.is_surface for s in samples], dtype=bool),
            np.array([np.full(3, np.nan) if s.normal is None else s.normal for s in samples],
                     dtype=np.float64).reshape(-1, 3),
        )


def sample_offsurface(road, per_point=4, radius=0.5, seed=0, normals=None):
    """Surface samples (distance 0) plus ``per_point`` cube-jittered samples per road point."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    R = np.asarray(road, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-radius, radius, size=(len(R), per_point, 3))
    Q = (R[:, None, :] + offsets).reshape(-1, 3)
    d = eq5_distance(Q, R) if len(Q) else np.zeros(0)
    surf_n = np.full((len(R), 3), np.nan) if normals is None else np.asarray(normals, dtype=np.float64)
    return SdfSamples(
        np.concatenate([R, Q]),
        np.concatenate([np.zeros(len(R)), d]),
        np.concatenate([np.ones(len(R), bool), np.zeros(len(Q), bool)]),
        np.concatenate([surf_n, np.full((len(Q), 3), np.nan)]),
    )


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def _softplus(z):
    bz = SOFTPLUS_BETA * z
    return (np.maximum(bz, 0) + np.log1p(np.exp(-np.abs(bz)))) / SOFTPLUS_BETA


@dataclass(eq=False)
class _Cache:
    h: list
    z: list
    J: list | None
    Jz: list | None


@dataclass(eq=False)
class SdfModel:
    """MLP f: R^3 -> R over normalized coordinates x~ = (x - centroid) * scale.

    ``weights[l]`` has shape (out, in); all parameters are float32.
    """

    weights: list
    biases: list
    centroid: np.ndarray
    scale: float
    frozen: bool = field(default=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float32) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float32).reshape(-1) for b in self.biases]
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty and paired")
        if self.weights[0].shape[1] != 3 or self.weights[-1].shape[0] != 1:
            raise ValueError("network must map 3 inputs to 1 output")
        for w, b, nxt in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if w.shape[0] != b.shape[0] or (nxt is not None and nxt.shape[1] != w.shape[0]):
                raise ValueError("inconsistent layer shapes")
        if not all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases)):
            raise ValueError("weights must be finite")

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, centroid, scale, width=128, depth=8, seed=0, radius=0.5):
        """Geometric initialization: the fresh network approximates |x~| - radius."""
        rng = np.random.default_rng(seed)
        dims = [3] + [width] * (depth - 1) + [1]
        W, B = [], []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            if i == depth - 1:
                w = rng.normal(np.sqrt(np.pi) / np.sqrt(din), 1e-4, size=(dout, din))
                b = np.full(dout, -radius)
            else:
                w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(dout), size=(dout, din))
                b = np.zeros(dout)
            W.append(w)
            B.append(b)
        return cls(W, B, centroid, scale)

    @staticmethod
    def normalization_for(points):
        """Centroid and scale mapping ``points`` into [-1, 1]^3."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        c = P.mean(axis=0)
        half = np.abs(P - c).max()
        return c, (1.0 / half if half > 0 else 1.0)

    # -- normalization -----------------------------------------------------

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.centroid) * self.scale

    def denormalize(self, xn):
        return np.asarray(xn, dtype=np.float64) / self.scale + self.centroid

    @property
    def n_layers(self):
        return len(self.weights)

    # -- evaluation --------------------------------------------------------

    def forward(self, xn, input_grad=False):
        """Evaluate f (and grad f when ``input_grad``) at normalized points.

        Computation runs in the dtype of ``xn`` (float32 or float64).
        Returns ``(f, g, cache)`` with ``g`` None unless requested.
        """
        xn = np.atleast_2d(xn)
        dt = xn.dtype if xn.dtype in (np.float32, np.float64) else np.float64
        h = xn.astype(dt, copy=False)
        n = len(h)
        J = None
        if input_grad:
            J = np.zeros((3, n, 3), dtype=dt)
            for d in range(3):
                J[d, :, d] = 1.0
        hs, zs, Js, Jzs = [], [], [], []
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = w.astype(dt, copy=False)
            hs.append(h)
            if input_grad:
                Js.append(J)
            z = h @ w.T + b.astype(dt, copy=False)
            Jz = J @ w.T if input_grad else None
            if l == last:
                f = z[:, 0]
                g = Jz[:, :, 0].T.copy() if input_grad else None
                zs.append(z)
                Jzs.append(Jz)
                break
            zs.append(z)
            Jzs.append(Jz)
            h = _softplus(z).astype(dt, copy=False)
            if input_grad:
                J = expit(SOFTPLUS_BETA * z).astype(dt, copy=False)[None] * Jz
        return f, g, _Cache(hs, zs, Js if input_grad else None, Jzs if input_grad else None)

    def backward(self, cache: _Cache, df, dg=None, param_grads=True):
        """Reverse pass for dL/df (N,) and optionally dL/dg (N, 3).

        Returns ``(param_grads, dxn)``; ``param_grads`` is a list of
        (dW, db) per layer, or None when ``param_grads`` is False.
        """
        last = self.n_layers - 1
        dt = cache.h[0].dtype
        dz = np.asarray(df, dtype=dt).reshape(-1, 1)
        dJz = None
        if dg is not None:
            if cache.J is None:
                raise ValueError("forward was run without input_grad")
            dJz = np.asarray(dg, dtype=dt).T[:, :, None]
        grads = [None] * self.n_layers
        for l in range(last, -1, -1):
            w = self.weights[l].astype(dt, copy=False)
            if l < last:
                z = cache.z[l]
                s1 = expit(SOFTPLUS_BETA * z).astype(dt, copy=False)
                # dh_{l+1} and dJ_{l+1} arrive in dz / dJz; push through the activation
                dz_new = dz * s1
                if dJz is not None:
                    s2 = (SOFTPLUS_BETA * s1 * (1.0 - s1)).astype(dt, copy=False)
                    dz_new = dz_new + s2 * np.sum(dJz * cache.Jz[l], axis=0)
                    dJz = s1[None] * dJz
                dz = dz_new
            if param_grads:
                dW = dz.T @ cache.h[l]
                if dJz is not None:
                    dW = dW + np.einsum("dno,dni->oi", dJz, cache.J[l], optimize=True)
                grads[l] = (dW, dz.sum(axis=0))
            dz = dz @ w
            if dJz is not None:
                dJz = dJz @ w
        return (grads if param_grads else None), dz

    def query(self, x):
        """Value and input gradient (in normalized coordinates) at world points."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        f, g, _ = self.forward(self.normalize(x.reshape(-1, 3)), input_grad=True)
        if single:
            return float(f[0]), g[0]
        return f, g

    def freeze(self):
        self.frozen = True
        for arr in self.weights + self.biases:
            arr.setflags(write=False)
        return self

    # -- checkpoint --------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", self.n_layers)]
        for w in self.weights:
            parts.append(struct.pack("<II", *w.shape))
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
        parts.append(self.centroid.astype("<f8").tobytes())
        parts.append(struct.pack("<d", self.scale))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> SdfModel:
        if data[:4] != MAGIC:
            raise ValueError("not an SDF1 checkpoint")
        try:
            (n,) = struct.unpack_from("<I", data, 4)
            off = 8
            shapes = []
            for _ in range(n):
                shapes.append(struct.unpack_from("<II", data, off))
                off += 8
            W, B = [], []
            for rows, cols in shapes:
                W.append(np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).astype(np.float32))
                off += 4 * rows * cols
                B.append(np.frombuffer(data, "<f4", rows, off).astype(np.float32))
                off += 4 * rows
            centroid = np.frombuffer(data, "<f8", 3, off).copy()
            off += 24
            (scale,) = struct.unpack_from("<d", data, off)
            off += 8
        except (struct.error, ValueError) as exc:
            raise ValueError(f"truncated SDF1 checkpoint: {exc}") from exc
        if off != len(data):
            raise ValueError("trailing bytes after SDF1 checkpoint")
        return cls(W, B, centroid, scale)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> SdfModel:
        return cls.from_bytes(Path(path).read_bytes()).freeze()


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class SdfFitConfig:
    lambda_n: float = 0.1
    lambda_eik: float = 0.01
    iterations: int = 20000
    lr: float = 1e-3
    batch: int = 4096
    surface_batch: int | None = None
    width: int = 128
    depth: int = 8
    seed: int = 0
    lr_decay: float = 1.0


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def sdf_objective(model: SdfModel, xn_all, d_all, xn_surf, n_surf, lambda_n, lambda_eik,
                  param_grads=True):
    """Value MSE over all samples plus normal and eikonal terms over surface samples.

    Inputs are already normalized (distances in normalized units). Returns
    ``(total, parts, grads)`` with grads a flat [W0, b0, W1, b1, ...] list.
    """
    f, _, cache = model.forward(xn_all)
    r = f - d_all
    value = float(np.mean(r * r))
    pg, _ = model.backward(cache, 2.0 * r / len(r), param_grads=param_grads)
    normal = eik = 0.0
    if len(xn_surf) and (lambda_n > 0 or lambda_eik > 0):
        _, g, cs = model.forward(xn_surf, input_grad=True)
        gnorm = np.sqrt(np.sum(g * g, axis=1))
        ns = len(g)
        e = gnorm - 1.0
        eik = float(np.mean(e * e))
        safe = np.maximum(gnorm, 1e-12)[:, None]
        dg = lambda_eik * 2.0 * e[:, None] * g / safe / ns
        has_n = ~np.isnan(n_surf).any(axis=1)
        if has_n.any():
            from .losses import sin2_between

            s2, ds_dg, _ = sin2_between(g[has_n], n_surf[has_n].astype(g.dtype))
            normal = float(s2.sum() / ns)
            dg[has_n] += lambda_n * ds_dg / ns
        pg2, _ = model.backward(cs, np.zeros(ns, dtype=g.dtype), dg.astype(g.dtype),
                                param_grads=param_grads)
        if param_grads:
            pg = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(pg, pg2)]
    total = value + lambda_n * normal + lambda_eik * eik
    flat = None
    if param_grads:
        flat = [t for pair in pg for t in pair]
    return total, {"value": value, "normal": normal, "eikonal": eik}, flat


def fit_sdf(samples: SdfSamples, cfg: SdfFitConfig | None = None, history=None, **overrides):
    """Fit the SDF network by Adam on minibatches; returns a frozen model.

    Normalization is derived from the surface samples. ``history``, if a
    list, receives one dict of loss parts per iteration.
    """
    cfg = cfg or SdfFitConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    surf = samples.is_surface
    if not surf.any():
        raise ValueError("samples contain no surface points")
    centroid, scale = SdfModel.normalization_for(samples.positions[surf])
    model = SdfModel.initialize(centroid, scale, cfg.width, cfg.depth, cfg.seed)
    xn = model.normalize(samples.positions).astype(np.float32)
    dn = (samples.distances * scale).astype(np.float32)
    surf_idx = np.flatnonzero(surf)
    normals = samples.normals.astype(np.float32)
    rng = np.random.default_rng(cfg.seed)
    params = [t for pair in zip(model.weights, model.biases) for t in pair]
    opt = _Adam(params, cfg.lr)
    sb = cfg.surface_batch or max(1, cfg.batch // 4)
    for it in range(cfg.iterations):
        bi = rng.integers(0, len(xn), size=min(cfg.batch, len(xn)))
        si = surf_idx[rng.integers(0, len(surf_idx), size=min(sb, len(surf_idx)))]
        total, parts, grads = sdf_objective(model, xn[bi], dn[bi], xn[si], normals[si],
                                            cfg.lambda_n, cfg.lambda_eik)
        if not np.isfinite(total):
            raise DivergenceError(f"SDF fit diverged at iteration {it}: {parts}", term="sdf_fit")
        if history is not None:
            history.append({"iteration": it, "total": total, **parts})
        lr = cfg.lr * cfg.lr_decay ** (it / max(1, cfg.iterations))
        opt.step(grads, lr)
    return model.freeze()


def eikonal_residual(model: SdfModel, points):
    """Mean | ||grad f|| - 1 | at world points."""
    _, g = model.query(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return float(np.mean(np.abs(np.linalg.norm(g, axis=1) - 1.0)))


def value_mae(model: SdfModel, samples: SdfSamples):
    """Mean |f(x~) - d~| in normalized units."""
    f, _ = model.query(samples.positions)
    return float(np.mean(np.abs(f - samples.distances * model.scale)))
