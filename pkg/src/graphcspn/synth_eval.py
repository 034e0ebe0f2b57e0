"""Synthetic scenes, sparse sampling, and depth-completion metrics.

Random choices here come from :class:`XorShift64Star`, a fixed integer
recurrence, so generated scenes and sample sets do not depend on the
platform or numpy version.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import CameraIntrinsics, DepthGrid, as_array

MASK64 = (1 << 64) - 1
METRIC_FIELDS = ("rmse", "mae", "irmse", "imae", "rel", "d1", "d2", "d3")
CSV_HEADER = ("scene",) + METRIC_FIELDS


class SceneError(ValueError):
    pass


class MetricsError(ValueError):
    pass


class XorShift64Star:
    """xorshift64* generator (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D).

    The 64-bit state is seeded through one splitmix64 round so that seed 0 is
    usable.
    """

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    intr: CameraIntrinsics
    height: int
    width: int
    near: float = 0.5
    far: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.near > 0:
            raise SceneError(f"near must be positive, got {self.near}")
        if not self.far > self.near:
            raise SceneError(f"far ({self.far}) must exceed near ({self.near})")
        if self.height < 1 or self.width < 1:
            raise SceneError("image size must be positive")
        if not self.primitives:
            raise SceneError("scene has no primitives")


LIGHT = np.array([-0.5, -0.3, -1.0]) / np.linalg.norm([-0.5, -0.3, -1.0])


def pixel_rays(height: int, width: int, intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) ray directions with unit w component; a hit at t has depth t."""
    p, q = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                       indexing="ij")
    return np.stack([(p - intr.c_p) / intr.f_p, (q - intr.c_q) / intr.f_q, np.ones_like(p)],
                    axis=-1)


def _hit_plane(rays, prim: Plane):
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = rays @ n
    num = float(np.dot(n, prim.point))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    return t, np.broadcast_to(n, rays.shape)


def _hit_sphere(rays, prim: Sphere):
    c = np.asarray(prim.center, dtype=np.float64)
    a = np.einsum("...i,...i", rays, rays)
    b = -2.0 * (rays @ c)
    cc = float(c @ c) - prim.radius**2
    disc = b * b - 4 * a * cc
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - root) / (2 * a)
    t1 = (-b + root) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    t = np.where(disc >= 0, t, np.inf)
    normal = (rays * np.where(np.isfinite(t), t, 0.0)[..., None] - c) / prim.radius
    return t, normal


def _hit_box(rays, prim: Box):
    lo = np.asarray(prim.lo, dtype=np.float64)
    hi = np.asarray(prim.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t1 = lo * inv
        t2 = hi * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    hit = (t_enter <= t_exit) & (t_exit > 0)
    t = np.where(hit, np.where(t_enter > 0, t_enter, t_exit), np.inf)
    normal = np.zeros(rays.shape)
    np.put_along_axis(normal, axis[..., None], 1.0, axis=-1)
    return t, normal


_HITTERS = {Plane: _hit_plane, Sphere: _hit_sphere, Box: _hit_box}


def render_scene(spec: SceneSpec):
    """Ray-cast the scene; returns (dense depth, Lambert shading in [0, 1])."""
    rays = pixel_rays(spec.height, spec.width, spec.intr)
    best = np.full((spec.height, spec.width), np.inf)
    normal = np.zeros(rays.shape)
    for prim in spec.primitives:
        t, n = _HITTERS[type(prim)](rays, prim)
        t = np.where((t >= spec.near) & (t <= spec.far) & np.isfinite(t), t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        normal = np.where(closer[..., None], n, normal)
    if not np.all(np.isfinite(best)):
        bad = np.argwhere(~np.isfinite(best))[0]
        raise SceneError(f"pixel ray {tuple(int(v) for v in bad)} hits no primitive in range")
    normal = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    # face the camera
    facing = np.where((np.einsum("...i,...i", normal, rays) > 0)[..., None], -normal, normal)
    shade = np.clip(facing @ LIGHT, 0.0, 1.0)
    return DepthGrid(best), DepthGrid(shade)


def random_scene(seed: int, height: int = 64, width: int = 64, near: float = 0.5,
                 far: float = 10.0) -> SceneSpec:
    """Room-like scene: slanted back wall, floor, spheres and boxes in front."""
    rng = XorShift64Star(seed)
    f = 0.9 * width
    intr = CameraIntrinsics(f, f, (height - 1) / 2.0, (width - 1) / 2.0)
    span = far - near
    wall = near + span * rng.uniform(0.45, 0.65)
    prims = [Plane((0.0, 0.0, wall),
                   (rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), -1.0)),
             # floor below the camera; p (rows) points down
             Plane((rng.uniform(0.9, 1.4), 0.0, 0.0), (-1.0, rng.uniform(-0.1, 0.1), 0.0))]
    for _ in range(1 + rng.below(3)):
        w = near + span * rng.uniform(0.12, 0.4)
        r = rng.uniform(0.15, 0.3) * w
        prims.append(Sphere((rng.uniform(-0.35, 0.35) * w, rng.uniform(-0.4, 0.4) * w, w), r))
    for _ in range(1 + rng.below(2)):
        w = near + span * rng.uniform(0.15, 0.45)
        cu, cv = rng.uniform(-0.35, 0.35) * w, rng.uniform(-0.4, 0.4) * w
        hu, hv, hw = (rng.uniform(0.1, 0.25) * w for _ in range(3))
        prims.append(Box((cu - hu, cv - hv, w - hw), (cu + hu, cv + hv, w + hw)))
    return SceneSpec(tuple(prims), intr, height, width, near, far, seed)


# --------------------------------------------------------------------------
# sparse sampling


def sample_sparse(dense, n: int, seed: int) -> DepthGrid:
    """Keep ``n`` valid pixels chosen uniformly without replacement; zero the rest."""
    d = as_array(dense)
    valid = np.flatnonzero(d > 0)
    if n < 0 or n > valid.size:
        raise SceneError(f"cannot sample {n} of {valid.size} valid pixels")
    rng = XorShift64Star(seed)
    pool = valid.tolist()
    for i in range(n):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    out = np.zeros(d.size)
    chosen = np.asarray(pool[:n], dtype=np.int64)
    out[chosen] = d.reshape(-1)[chosen]
    return DepthGrid(out.reshape(d.shape))


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    """Errors over valid ground-truth pixels. Inverse metrics are in 1/m.

    ``irmse`` and ``imae`` are NaN (and ``inverse_defined`` False) when the
    prediction is not positive on every valid pixel.
    """

    rmse: float
    mae: float
    irmse: float
    imae: float
    rel: float
    d1: float
    d2: float
    d3: float
    inverse_defined: bool = field(default=True)

    def row(self) -> list[float]:
        return [getattr(self, f) for f in METRIC_FIELDS]

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, gt) -> MetricsRecord:
    p, g = as_array(pred), as_array(gt)
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch {p.shape} vs {g.shape}")
    mask = g > 0
    if not mask.any():
        raise MetricsError("ground truth has no valid pixel")
    d, t = p[mask], g[mask]
    err = d - t
    rmse = math.sqrt(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    rel = float(np.mean(np.abs(err) / t))
    if np.all(d > 0):
        ierr = 1.0 / t - 1.0 / d
        irmse, imae, inv_ok = math.sqrt(np.mean(ierr * ierr)), float(np.mean(np.abs(ierr))), True
        ratio = np.maximum(t / d, d / t)
    else:
        irmse = imae = float("nan")
        inv_ok = False
        with np.errstate(divide="ignore"):
            ratio = np.where(d > 0, np.maximum(t / np.where(d > 0, d, 1.0), d / t), np.inf)
    deltas = [float(np.mean(ratio < 1.25**i)) for i in (1, 2, 3)]
    return MetricsRecord(rmse, mae, irmse, imae, rel, *deltas, inverse_defined=inv_ok)


def mean_metrics(records) -> MetricsRecord:
    records = list(records)
    if not records:
        raise MetricsError("no records to average")
    vals = np.array([r.row() for r in records], dtype=np.float64)
    means = vals.mean(axis=0)
    return MetricsRecord(*means.tolist(), inverse_defined=all(r.inverse_defined for r in records))


def format_metric(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def write_metrics_csv(path, rows) -> None:
    """``rows`` is a sequence of (scene name, MetricsRecord)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, rec in rows:
            w.writerow([name] + [format_metric(v) for v in rec.row()])


def read_metrics_csv(path) -> list[tuple[str, list[float]]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_HEADER:
            raise MetricsError(f"{path}: unexpected header {header}")
        return [(row[0], [float(v) for v in row[1:]]) for row in r]
