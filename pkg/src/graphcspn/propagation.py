"""Spatial propagation: the fixed 3x3 local update and the graph step with edge attention.

Both engines work in float64. The graph step returns caches so that the
learning module can run the exact reverse pass through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NeighborTable, knn
from .graph import (
    PatchGraph,
    PatchLayout,
    center_positions,
    gather_patches,
    scatter_patches,
)
from .grid import CameraIntrinsics, DepthGrid, FeatureGrid, as_array


class PropagationError(ValueError):
    pass


# 3x3 offsets in row-major order; index 4 is the pixel itself
KERNEL_OFFSETS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]
SELF_INDEX = 4


def normalize_kernel(raw) -> np.ndarray:
    """Turn raw (H, W, 9) affinities into weights summing to 1 per pixel.

    Neighbor weights are divided by the sum of their absolute values and the
    self weight takes the remainder. The raw self entry is ignored.
    """
    raw = np.asarray(raw, dtype=np.float64)
    nbr = np.delete(raw, SELF_INDEX, axis=-1)
    denom = np.abs(nbr).sum(axis=-1, keepdims=True)
    nbr = nbr / np.where(denom > 0, denom, 1.0)
    self_w = 1.0 - nbr.sum(axis=-1, keepdims=True)
    return np.insert(nbr, SELF_INDEX, self_w[..., 0], axis=-1)


def cspn_step(depth, kern) -> DepthGrid:
    """One local propagation step with a per-pixel 3x3 affinity kernel.

    Weights of neighbors falling outside the image are added to the self weight.
    Negative results are clamped to 0 on return.
    """
    d = as_array(depth)
    a = np.asarray(as_array(kern), dtype=np.float64)
    h, w = d.shape
    if a.shape != (h, w, 9):
        raise PropagationError(f"kernel field must be ({h}, {w}, 9), got {a.shape}")

    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = d
    inside = np.zeros((h + 2, w + 2))
    inside[1:-1, 1:-1] = 1.0

    out = np.zeros((h, w))
    self_w = a[:, :, SELF_INDEX].copy()
    for idx, (di, dj) in enumerate(KERNEL_OFFSETS):
        if idx == SELF_INDEX:
            continue
        nb = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        ok = inside[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        out += a[:, :, idx] * nb
        self_w += a[:, :, idx] * (1.0 - ok)
    out += self_w * d
    return DepthGrid(np.maximum(out, 0.0))


# --------------------------------------------------------------------------
# MLPs


@dataclass(eq=False)
class MlpSpec:
    """Fully connected network; ReLU between layers, linear output.

    ``weights[i]`` has shape (in, out). Arrays may be shared with a ParamStore.
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise PropagationError("MLP needs matching, non-empty weight and bias lists")
        if self.activation != "relu":
            raise PropagationError(f"unsupported activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise PropagationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise PropagationError(f"layer {i}: input width {w.shape[0]} does not chain")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def zeros(cls, widths) -> "MlpSpec":
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]])

    @classmethod
    def random(cls, widths, rng: np.random.Generator) -> "MlpSpec":
        ws, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(a)
            ws.append(rng.uniform(-bound, bound, size=(a, b)))
            bs.append(rng.uniform(-bound, bound, size=b))
        return cls(ws, bs)


def mlp_forward(spec: MlpSpec, x: np.ndarray):
    """Apply the MLP to the last axis of ``x``; returns (y, cache)."""
    lead = x.shape[:-1]
    if x.shape[-1] != spec.in_width:
        raise PropagationError(f"MLP expects width {spec.in_width}, got {x.shape[-1]}")
    h = x.reshape(-1, x.shape[-1])
    inputs, pre = [], []
    last = len(spec.weights) - 1
    for i, (w, b) in enumerate(zip(spec.weights, spec.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h.reshape(*lead, spec.out_width), (lead, inputs, pre)


def mlp_backward(spec: MlpSpec, cache, dy: np.ndarray):
    """Returns (dx, [(dW, db), ...]) for the forward call that produced ``cache``."""
    lead, inputs, pre = cache
    g = dy.reshape(-1, spec.out_width)
    grads = [None] * len(spec.weights)
    for i in range(len(spec.weights) - 1, -1, -1):
        if i < len(spec.weights) - 1:
            g = g * (pre[i] > 0)
        grads[i] = (inputs[i].T @ g, g.sum(axis=0))
        g = g @ spec.weights[i].T
    return g.reshape(*lead, spec.in_width), grads


# --------------------------------------------------------------------------
# graph propagation


@dataclass(eq=False)
class PropagationParams:
    phi_self: MlpSpec
    phi_nbr: MlpSpec
    psi: MlpSpec

    def check(self, feature_len: int, patch_size: int) -> None:
        expected = {
            "phi_self": (feature_len, patch_size),
            "phi_nbr": (2 * feature_len, patch_size),
            "psi": (2 * feature_len, patch_size),
        }
        for name, (i, o) in expected.items():
            spec = getattr(self, name)
            if (spec.in_width, spec.out_width) != (i, o):
                raise PropagationError(
                    f"{name} maps {spec.in_width}->{spec.out_width}, expected {i}->{o}"
                )

    @classmethod
    def random(cls, feature_len: int, patch_size: int, rng: np.random.Generator,
               hidden: int = 64) -> "PropagationParams":
        return cls(
            MlpSpec.random([feature_len, hidden, patch_size], rng),
            MlpSpec.random([2 * feature_len, hidden, patch_size], rng),
            MlpSpec.random([2 * feature_len, hidden, patch_size], rng),
        )


@dataclass(frozen=True)
class PropagationConfig:
    steps: int = 3
    k: int = 8
    patch_h: int = 4
    patch_w: int = 4
    position_scale: float = 10.0
    reimpose_sparse: bool = False
    record_intermediate: bool = False
    attention: bool = True
    geometry: bool = True
    dynamic: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise PropagationError(f"steps must be >= 1, got {self.steps}")
        if self.k < 1:
            raise PropagationError(f"k must be >= 1, got {self.k}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise PropagationError("patch size must be positive")
        if not self.position_scale > 0:
            raise PropagationError("position_scale must be positive")


def _check_graph(graph: PatchGraph) -> NeighborTable:
    if graph.neighbors is None:
        raise PropagationError("graph has no neighbor table")
    return graph.neighbors


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _with_self(nbr: np.ndarray) -> np.ndarray:
    n = nbr.shape[0]
    return np.concatenate([nbr, np.arange(n)[:, None]], axis=1)


def attention_logits(x: np.ndarray, nbr: np.ndarray, psi: MlpSpec):
    """psi(x_i || x_j) for j in neighbors(i) then i itself -> (N, k+1, P)."""
    idx = _with_self(nbr)
    xi = np.broadcast_to(x[:, None, :], (x.shape[0], idx.shape[1], x.shape[1]))
    z = np.concatenate([xi, x[idx]], axis=-1)
    return mlp_forward(psi, z)


def attention_coefficients(graph: PatchGraph, psi: MlpSpec) -> np.ndarray:
    """Channel-wise softmax weights, shape (N, k+1, P); the last slot is the node itself."""
    nbr = _check_graph(graph).indices
    length = graph.layout.feature_len
    if psi.in_width != 2 * length or psi.out_width != graph.layout.patch_size:
        raise PropagationError(
            f"psi must map {2 * length}->{graph.layout.patch_size}, "
            f"got {psi.in_width}->{psi.out_width}"
        )
    logits, _ = attention_logits(graph.features, nbr, psi)
    return _softmax(logits, axis=1)


@dataclass(eq=False)
class StepCache:
    x: np.ndarray
    nbr: np.ndarray
    alpha: np.ndarray
    f_self: np.ndarray
    f_nbr: np.ndarray
    self_cache: tuple
    nbr_cache: tuple
    psi_cache: tuple | None


def edge_attention_forward(x: np.ndarray, nbr: np.ndarray, params: PropagationParams,
                           attention: bool = True):
    """New patch states for node features ``x`` (N, L); returns (out, cache)."""
    n, length = x.shape
    k = nbr.shape[1]
    if attention:
        logits, psi_cache = attention_logits(x, nbr, params.psi)
        alpha = _softmax(logits, axis=1)
    else:
        psi_cache = None
        alpha = np.full((n, k + 1, params.phi_self.out_width), 1.0 / (k + 1))

    f_self, self_cache = mlp_forward(params.phi_self, x)
    xi = np.broadcast_to(x[:, None, :], (n, k, length))
    f_nbr, nbr_cache = mlp_forward(params.phi_nbr, np.concatenate([xi, x[nbr] - xi], axis=-1))

    out = alpha[:, k] * f_self + (alpha[:, :k] * f_nbr).sum(axis=1)
    cache = StepCache(x, nbr, alpha, f_self, f_nbr, self_cache, nbr_cache, psi_cache)
    return out, cache


def edge_attention_backward(cache: StepCache, dout: np.ndarray, params: PropagationParams):
    """Reverse pass of :func:`edge_attention_forward`.

    Returns (dx, grads) where grads maps 'phi_self' / 'phi_nbr' / 'psi' to
    per-layer (dW, db) lists; 'psi' is absent when attention was off.
    """
    x, nbr, alpha = cache.x, cache.nbr, cache.alpha
    n, length = x.shape
    k = nbr.shape[1]
    grads = {}
    dx = np.zeros_like(x)

    d_self = alpha[:, k] * dout
    dx_s, grads["phi_self"] = mlp_backward(params.phi_self, cache.self_cache, d_self)
    dx += dx_s

    d_nbr = alpha[:, :k] * dout[:, None, :]
    dz, grads["phi_nbr"] = mlp_backward(params.phi_nbr, cache.nbr_cache, d_nbr)
    # z = [x_i, x_j - x_i]
    dx += (dz[..., :length] - dz[..., length:]).sum(axis=1)
    np.add.at(dx, nbr, dz[..., length:])

    if cache.psi_cache is not None:
        dalpha = np.empty_like(alpha)
        dalpha[:, :k] = cache.f_nbr * dout[:, None, :]
        dalpha[:, k] = cache.f_self * dout
        dlogits = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dz, grads["psi"] = mlp_backward(params.psi, cache.psi_cache, dlogits)
        dx += dz[..., :length].sum(axis=1)
        np.add.at(dx, _with_self(nbr), dz[..., length:])
    return dx, grads


def edge_attention_step(graph: PatchGraph, phi_self: MlpSpec, phi_nbr: MlpSpec,
                        psi: MlpSpec) -> np.ndarray:
    """One message-passing step; returns the new (N, P_h*P_w) patch part."""
    nbr = _check_graph(graph).indices
    params = PropagationParams(phi_self, phi_nbr, psi)
    params.check(graph.layout.feature_len, graph.layout.patch_size)
    out, _ = edge_attention_forward(graph.features, nbr, params)
    return out


@dataclass(eq=False)
class PropagationTrace:
    """Everything one forward run produced, in step order."""

    layout: PatchLayout
    states: list = field(default_factory=list)       # node states, index 0 = initial
    positions: list = field(default_factory=list)    # unscaled (N, 3) used at each step
    tables: list = field(default_factory=list)       # neighbor index arrays per step
    caches: list = field(default_factory=list)
    overwrite: np.ndarray | None = None              # (N, P) mask of re-imposed entries
    readouts: list = field(default_factory=list)     # clamped depth after each step


def run_propagation(nodes0: np.ndarray, initial_depth, sparse, layout: PatchLayout,
                    intr: CameraIntrinsics, params: PropagationParams,
                    config: PropagationConfig, replay: PropagationTrace | None = None
                    ) -> PropagationTrace:
    """Iterate the graph step from initial node states ``nodes0``.

    With ``replay`` set, the positions and neighbor tables of that earlier run
    are reused instead of being recomputed (finite-difference checks hold them
    fixed, matching the reverse pass).
    """
    params.check(layout.feature_len, layout.patch_size)
    if config.k >= layout.n_nodes:
        raise PropagationError(f"k={config.k} needs more than {layout.n_nodes} nodes")
    trace = PropagationTrace(layout)
    nodes = np.asarray(nodes0, dtype=np.float64)
    trace.states.append(nodes)

    if config.reimpose_sparse:
        sp = gather_patches(as_array(sparse)[:, :, None].repeat(layout.patch_size, 2), layout)
        trace.overwrite = sp > 0

    pos = center_positions(initial_depth, layout, intr)
    table = None
    for s in range(config.steps):
        if replay is not None:
            pos, table = replay.positions[s], replay.tables[s]
        elif table is None or config.dynamic:
            table = knn(pos if config.geometry else nodes, config.k).indices
        trace.positions.append(pos)
        trace.tables.append(table)

        x = np.concatenate([nodes, pos / config.position_scale], axis=1)
        nodes, cache = edge_attention_forward(x, table, params, config.attention)
        if trace.overwrite is not None:
            nodes = np.where(trace.overwrite, sp, nodes)
        trace.caches.append(cache)
        trace.states.append(nodes)

        readout = scatter_patches(nodes, layout)
        trace.readouts.append(readout)
        pos = center_positions(readout, layout, intr)
    return trace


def propagate(initial_depth, features, sparse, intr: CameraIntrinsics,
              params: PropagationParams, config: PropagationConfig):
    """Refine ``initial_depth`` by graph propagation over patches of ``features``.

    Returns (final depth, intermediates); intermediates is the list of the
    ``config.steps`` per-step depth maps when ``record_intermediate`` is set,
    else None.
    """
    feat = features if isinstance(features, FeatureGrid) else FeatureGrid(features)
    d0 = as_array(initial_depth)
    if d0.shape != (feat.height, feat.width) or as_array(sparse).shape != d0.shape:
        raise PropagationError("initial depth, features and sparse input must share H x W")
    layout = PatchLayout.for_image(feat.height, feat.width, config.patch_h, config.patch_w)
    trace = run_propagation(gather_patches(feat, layout), d0, sparse, layout, intr, params, config)
    final = trace.readouts[-1]
    return final, (list(trace.readouts) if config.record_intermediate else None)
