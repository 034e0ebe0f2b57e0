"""Patch-wise graph construction and graph-to-image readout.

A C-channel feature grid with C = P_h * P_w is cut into non-overlapping
P_h x P_w patches. Local offset (i, j) of a patch reads channel i * P_w + j
at that offset's own pixel, so a plane replicated across all channels is
gathered and scattered back without change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborTable, backproject, knn
from .grid import CameraIntrinsics, DepthGrid, FeatureGrid, as_array


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class PatchLayout:
    patch_h: int
    patch_w: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if min(self.patch_h, self.patch_w, self.grid_h, self.grid_w) < 1:
            raise GraphError(f"invalid patch layout {self}")

    @classmethod
    def for_image(cls, height: int, width: int, patch_h: int, patch_w: int) -> "PatchLayout":
        if patch_h < 1 or patch_w < 1:
            raise GraphError(f"patch size must be positive, got {patch_h}x{patch_w}")
        if height % patch_h or width % patch_w:
            raise GraphError(
                f"image {height}x{width} is not divisible into {patch_h}x{patch_w} patches"
            )
        return cls(patch_h, patch_w, height // patch_h, width // patch_w)

    @property
    def height(self) -> int:
        return self.grid_h * self.patch_h

    @property
    def width(self) -> int:
        return self.grid_w * self.patch_w

    @property
    def patch_size(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def n_nodes(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def feature_len(self) -> int:
        return self.patch_size + 3

    def top_left(self) -> np.ndarray:
        """(N, 2) array of (row, col) patch origins in node order."""
        n = np.arange(self.n_nodes)
        return np.stack([(n // self.grid_w) * self.patch_h, (n % self.grid_w) * self.patch_w], axis=1)

    def centers(self) -> np.ndarray:
        """(N, 2) continuous pixel coordinates of the patch centers."""
        off = np.array([(self.patch_h - 1) / 2.0, (self.patch_w - 1) / 2.0])
        return self.top_left() + off

    def check(self, height: int, width: int) -> None:
        if (height, width) != (self.height, self.width):
            raise GraphError(
                f"grid {height}x{width} does not match layout {self.height}x{self.width}"
            )


@dataclass(frozen=True, eq=False)
class PatchGraph:
    layout: PatchLayout
    features: np.ndarray
    neighbors: NeighborTable | None
    intr: CameraIntrinsics
    scale: float = 10.0

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        n, length = self.layout.n_nodes, self.layout.feature_len
        if feats.shape != (n, length):
            raise GraphError(f"features must be ({n}, {length}), got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise GraphError("node features must be finite")
        if self.neighbors is not None and self.neighbors.n_nodes != n:
            raise GraphError("neighbor table size does not match node count")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def n_nodes(self) -> int:
        return self.layout.n_nodes

    @property
    def patches(self) -> np.ndarray:
        return self.features[:, : self.layout.patch_size]

    @property
    def positions(self) -> np.ndarray:
        return self.features[:, self.layout.patch_size :]


def _blocks(arr: np.ndarray, layout: PatchLayout) -> np.ndarray:
    # (H, W, ...) -> (N, P_h * P_w, ...)
    rest = arr.shape[2:]
    b = arr.reshape(layout.grid_h, layout.patch_h, layout.grid_w, layout.patch_w, *rest)
    b = np.moveaxis(b, 2, 1)
    return b.reshape(layout.n_nodes, layout.patch_size, *rest)


def _unblocks(nodes: np.ndarray, layout: PatchLayout) -> np.ndarray:
    b = nodes.reshape(layout.grid_h, layout.grid_w, layout.patch_h, layout.patch_w)
    return np.moveaxis(b, 1, 2).reshape(layout.height, layout.width)


def gather_patches(feat, layout: PatchLayout) -> np.ndarray:
    """(H, W, C) feature grid -> (N, P_h * P_w) node matrix."""
    arr = as_array(feat)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    layout.check(arr.shape[0], arr.shape[1])
    if arr.shape[2] != layout.patch_size:
        raise GraphError(
            f"feature grid has {arr.shape[2]} channels, layout needs {layout.patch_size}"
        )
    blocks = _blocks(arr, layout)
    l = np.arange(layout.patch_size)
    return blocks[:, l, l]


def gather_patches_grad(dnodes: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Adjoint of :func:`gather_patches`: (N, P) gradient -> (H, W, C)."""
    p = layout.patch_size
    blocks = np.zeros((layout.n_nodes, p, p))
    l = np.arange(p)
    blocks[:, l, l] = dnodes
    b = blocks.reshape(layout.grid_h, layout.grid_w, layout.patch_h, layout.patch_w, p)
    return np.moveaxis(b, 1, 2).reshape(layout.height, layout.width, p)


def scatter_raw(nodes: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Place node patches back on the image without clamping."""
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.shape != (layout.n_nodes, layout.patch_size):
        raise GraphError(
            f"node matrix must be ({layout.n_nodes}, {layout.patch_size}), got {nodes.shape}"
        )
    return _unblocks(nodes, layout)


def scatter_patches(nodes: np.ndarray, layout: PatchLayout) -> DepthGrid:
    """Node patches -> depth image; negative values clamp to 0."""
    return DepthGrid(np.maximum(scatter_raw(nodes, layout), 0.0))


def patch_depths(depth, layout: PatchLayout) -> np.ndarray:
    """Mean depth per node, floored at 1e-6 m."""
    arr = as_array(depth)
    layout.check(*arr.shape)
    return np.maximum(_blocks(arr, layout).mean(axis=1), 1e-6)


def center_positions(depth, layout: PatchLayout, intr: CameraIntrinsics) -> np.ndarray:
    """Unscaled (N, 3) back-projected patch centers."""
    c = layout.centers()
    return backproject(c[:, 0], c[:, 1], patch_depths(depth, layout), intr)


def embed_positions(nodes, depth_readout, layout: PatchLayout, intr: CameraIntrinsics,
                    scale: float = 10.0) -> np.ndarray:
    """Append scaled 3D patch-center positions to the node patches -> (N, L)."""
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.shape != (layout.n_nodes, layout.patch_size):
        raise GraphError(
            f"node matrix must be ({layout.n_nodes}, {layout.patch_size}), got {nodes.shape}"
        )
    if not scale > 0:
        raise GraphError(f"position scale must be positive, got {scale}")
    pos = center_positions(depth_readout, layout, intr)
    return np.concatenate([nodes, pos / scale], axis=1)


def build_graph(feat: FeatureGrid, depth, layout: PatchLayout, intr: CameraIntrinsics,
                scale: float = 10.0, k: int | None = None) -> PatchGraph:
    feats = embed_positions(gather_patches(feat, layout), depth, layout, intr, scale)
    graph = PatchGraph(layout, feats, None, intr, scale)
    if k is not None:
        graph = PatchGraph(layout, feats, rebuild_topology(graph, k), intr, scale)
    return graph


def rebuild_topology(graph: PatchGraph, k: int) -> NeighborTable:
    """k-NN over the graph's current patch-center positions, in meters."""
    return knn(graph.positions * graph.scale, k)


def scatter_patches_grad(dimage: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Adjoint of :func:`scatter_raw`: (H, W) gradient -> (N, P) node gradient."""
    dimage = np.asarray(dimage, dtype=np.float64)
    layout.check(*dimage.shape)
    return _blocks(dimage, layout)
