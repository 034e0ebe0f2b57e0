"""Pinhole back-projection and exact k-nearest-neighbor tables in 3D."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import CameraIntrinsics


class GeometryError(ValueError):
    pass


class Point3(NamedTuple):
    u: float
    v: float
    w: float


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """``indices[i]`` holds the k nearest other nodes of node i, nearest first."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise GeometryError(f"neighbor table must be 2-d, got shape {idx.shape}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def n_nodes(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __eq__(self, other):
        if not isinstance(other, NeighborTable):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)


def backproject(p, q, d, intr: CameraIntrinsics):
    """Lift pixel (p, q) at depth d to camera coordinates (u, v, w).

    Works elementwise on arrays; scalar inputs return a ``Point3``.
    """
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr <= 0):
        raise GeometryError("back-projection needs positive depth")
    u = d_arr * (np.asarray(p, dtype=np.float64) - intr.c_p) / intr.f_p
    v = d_arr * (np.asarray(q, dtype=np.float64) - intr.c_q) / intr.f_q
    w = d_arr * 1.0
    if u.ndim == 0 and v.ndim == 0 and w.ndim == 0:
        return Point3(float(u), float(v), float(w))
    return np.stack(np.broadcast_arrays(u, v, w), axis=-1)


def project(pt, intr: CameraIntrinsics):
    """Inverse of :func:`backproject`: returns (p, q, d)."""
    pt = np.asarray(pt, dtype=np.float64)
    u, v, w = pt[..., 0], pt[..., 1], pt[..., 2]
    if np.any(w <= 0):
        raise GeometryError("projection needs positive w")
    p = intr.c_p + u * intr.f_p / w
    q = intr.c_q + v * intr.f_q / w
    if pt.ndim == 1:
        return float(p), float(q), float(w)
    return np.stack([p, q, w], axis=-1)


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences rather than |a|^2 - 2ab + |b|^2: exact ties stay ties
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn(points, k: int, chunk: int = 512) -> NeighborTable:
    """Exhaustive k-NN over the rows of ``points`` (any dimension), self excluded.

    Rows are ordered by (distance, index), so ties go to the lower index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise GeometryError(f"points must be a non-empty (N, D) array, got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= k < n:
        raise GeometryError(f"k must satisfy 1 <= k < N={n}, got {k}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points must be finite")

    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = pairwise_sq_dist(pts[start:stop], pts)
        rows = np.arange(stop - start)
        d2[rows, rows + start] = np.inf
        # stable sort keeps ascending index order among equal distances
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :k]
    return NeighborTable(out)
