"""Trainable pipeline: IDW + residual-convolution initializer feeding graph propagation.

Gradients are derived by hand. Node positions and neighbor tables are
treated as constants inside each step, so the reverse pass is the exact
derivative of the forward pass with those quantities held fixed.
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    PatchLayout,
    gather_patches,
    gather_patches_grad,
    scatter_patches_grad,
    scatter_raw,
)
from .grid import CameraIntrinsics, DepthGrid, FeatureGrid, as_array, valid_mask
from .propagation import (
    MlpSpec,
    PropagationConfig,
    PropagationParams,
    PropagationTrace,
    edge_attention_backward,
    run_propagation,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("l1", "smooth_l1", "l2")
CONV_HIDDEN = 8
# gradients below this norm count as zero in relative-error checks
GRAD_FLOOR = 1e-6
MLP_NAMES = ("phi_self", "phi_nbr", "psi")


class LearningError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameters with same-shaped gradient buffers."""

    def __init__(self, params=None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        return self.names() == other.names() and all(
            self[n].shape == other[n].shape and np.allclose(self[n], other[n], rtol=0, atol=atol)
            for n in self.names()
        )

    def mlp(self, prefix: str) -> MlpSpec:
        ws, bs, i = [], [], 0
        while f"{prefix}.{i}.w" in self.params:
            ws.append(self.params[f"{prefix}.{i}.w"])
            bs.append(self.params[f"{prefix}.{i}.b"])
            i += 1
        return MlpSpec(ws, bs)

    def propagation_params(self) -> PropagationParams:
        return PropagationParams(*(self.mlp(n) for n in MLP_NAMES))

    @property
    def patch_size(self) -> int:
        return self.params["init.conv2.w"].shape[-1]


def init_params(patch_h: int, patch_w: int, seed: int, hidden: int = 64,
                conv_hidden: int = CONV_HIDDEN) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    p = patch_h * patch_w
    length = p + 3
    store = ParamStore()

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    store.add("init.conv1.w", uniform((3, 3, 3, conv_hidden), 27))
    store.add("init.conv1.b", uniform((conv_hidden,), 27))
    store.add("init.conv2.w", uniform((3, 3, conv_hidden, p), 9 * conv_hidden))
    store.add("init.conv2.b", uniform((p,), 9 * conv_hidden))
    for name, fan_in in (("phi_self", length), ("phi_nbr", 2 * length), ("psi", 2 * length)):
        store.add(f"{name}.0.w", uniform((fan_in, hidden), fan_in))
        store.add(f"{name}.0.b", uniform((hidden,), fan_in))
        store.add(f"{name}.1.w", uniform((hidden, p), hidden))
        store.add(f"{name}.1.b", uniform((p,), hidden))
    return store


# --------------------------------------------------------------------------
# layers


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 convolution with replicate padding. x: (H, W, Cin), w: (3, 3, Cin, Cout)."""
    h, wd, cin = x.shape
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    cols = np.stack(
        [pad[di : di + h, dj : dj + wd] for di in range(3) for dj in range(3)], axis=2
    ).reshape(h * wd, 9 * cin)
    out = cols @ w.reshape(9 * cin, -1) + b
    return out.reshape(h, wd, -1), cols


def conv3x3_backward(cols: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True):
    h, wd, cout = dout.shape
    cin = w.shape[2]
    d2 = dout.reshape(h * wd, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(h, wd, 3, 3, cin)
    dpad = np.zeros((h + 2, wd + 2, cin))
    for di in range(3):
        for dj in range(3):
            dpad[di : di + h, dj : dj + wd] += dcols[:, :, di, dj]
    # fold the replicated border back onto the edge pixels
    dx = dpad[1:-1, 1:-1].copy()
    dx[0] += dpad[0, 1:-1]
    dx[-1] += dpad[-1, 1:-1]
    dx[:, 0] += dpad[1:-1, 0]
    dx[:, -1] += dpad[1:-1, -1]
    dx[0, 0] += dpad[0, 0]
    dx[0, -1] += dpad[0, -1]
    dx[-1, 0] += dpad[-1, 0]
    dx[-1, -1] += dpad[-1, -1]
    return dx, dw, db


def idw_fill(sparse, power: float = 2.0, neighbors: int = 32, chunk: int = 4096) -> np.ndarray:
    """Inverse-distance-weighted fill from the ``neighbors`` nearest valid pixels.

    Valid pixels keep their value. Ties in distance go to the lower pixel index.
    """
    s = as_array(sparse)
    h, w = s.shape
    vr, vc = np.nonzero(s > 0)
    if vr.size == 0:
        raise LearningError("sparse input has no valid pixel")
    vals = s[vr, vc]
    m = min(neighbors, vr.size)
    rr, cc = np.divmod(np.arange(h * w), w)
    out = np.empty(h * w)
    for start in range(0, h * w, chunk):
        stop = min(h * w, start + chunk)
        d2 = (rr[start:stop, None] - vr[None, :]) ** 2 + (cc[start:stop, None] - vc[None, :]) ** 2
        d2 = d2.astype(np.float64)
        near = np.argsort(d2, axis=1, kind="stable")[:, :m]
        dn = np.take_along_axis(d2, near, axis=1)
        wts = np.where(dn > 0, 1.0 / np.where(dn > 0, dn, 1.0) ** (power / 2.0), 0.0)
        # offsets from the nearest site keep a constant field exactly constant
        ref = vals[near[:, 0]]
        est = ref + (wts * (vals[near] - ref[:, None])).sum(axis=1) / np.where(
            dn[:, 0] > 0, wts.sum(axis=1), 1.0)
        # a query on a valid pixel returns that pixel's value exactly
        exact = dn[:, 0] == 0
        est[exact] = vals[near[exact, 0]]
        out[start:stop] = est
    return out.reshape(h, w)


def initializer_inputs(sparse, gray=None):
    """Parameter-free part of the initializer: (D0, stacked conv input)."""
    s = as_array(sparse)
    d0 = idw_fill(s)
    g = np.zeros_like(s) if gray is None else as_array(gray)
    if g.shape != s.shape:
        raise LearningError("guidance image must match the sparse depth size")
    return d0, np.stack([d0, valid_mask(s).astype(np.float64), g], axis=-1)


def _init_forward(store: ParamStore, stack: np.ndarray, d0: np.ndarray):
    h1, cols1 = conv3x3_forward(stack, store["init.conv1.w"], store["init.conv1.b"])
    a1 = np.maximum(h1, 0.0)
    r, cols2 = conv3x3_forward(a1, store["init.conv2.w"], store["init.conv2.b"])
    return d0[:, :, None] + r, (cols1, h1, cols2)


def initializer_forward(sparse, gray, store: ParamStore):
    """Initial depth (IDW fill) and the C-channel residual feature grid."""
    d0, stack = initializer_inputs(sparse, gray)
    feats, _ = _init_forward(store, stack, d0)
    return DepthGrid(d0), FeatureGrid(feats)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    total: float
    main: float
    auxiliary: list
    valid_count: int


def _loss_and_grad(pred: np.ndarray, gt: np.ndarray, kind: str):
    mask = gt > 0
    nv = int(mask.sum())
    if nv == 0:
        raise LearningError("ground truth has no valid pixel")
    if kind not in LOSS_KINDS:
        raise LearningError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    e = np.where(mask, pred - gt, 0.0)
    if kind == "l1":
        val, g = np.abs(e), np.sign(e)
    elif kind == "smooth_l1":
        a = np.abs(e)
        small = a < 1.0
        val = np.where(small, 0.5 * e * e, a - 0.5)
        g = np.where(small, e, np.sign(e))
    else:
        val, g = e * e, 2.0 * e
    return float(val[mask].sum() / nv), np.where(mask, g, 0.0) / nv, nv


def masked_l1(pred, gt) -> float:
    p, g = as_array(pred), as_array(gt)
    if p.shape != g.shape:
        raise LearningError(f"shape mismatch {p.shape} vs {g.shape}")
    return _loss_and_grad(p, g, "l1")[0]


def loss_with_auxiliary(final, intermediates, gt, weight: float = 0.1,
                        kind: str = "l1") -> LossReport:
    return _loss_terms(final, intermediates, gt, weight, kind)[0]


def _loss_terms(final, intermediates, gt, weight, kind):
    if weight < 0:
        raise LearningError("auxiliary weight must be >= 0")
    g = as_array(gt)
    main, dmain, nv = _loss_and_grad(as_array(final), g, kind)
    aux, daux = [], []
    for inter in intermediates or []:
        v, d, _ = _loss_and_grad(as_array(inter), g, kind)
        aux.append(v)
        daux.append(d)
    total = main + weight * sum(aux)
    return LossReport(total, main, aux, nv), dmain, daux


# --------------------------------------------------------------------------
# forward / backward


@dataclass(eq=False)
class Sample:
    """One training or evaluation scene."""

    name: str
    sparse: DepthGrid
    gt: DepthGrid
    intr: CameraIntrinsics
    gray: DepthGrid | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def inputs(self):
        if "inputs" not in self._cache:
            self._cache["inputs"] = initializer_inputs(self.sparse, self.gray)
        return self._cache["inputs"]


@dataclass(eq=False)
class ForwardPass:
    layout: PatchLayout
    d0: np.ndarray
    features: np.ndarray
    init_cache: tuple
    trace: PropagationTrace

    @property
    def final(self) -> DepthGrid:
        return self.trace.readouts[-1]

    @property
    def intermediates(self) -> list:
        return list(self.trace.readouts)


def forward(store: ParamStore, sample: Sample, config: PropagationConfig,
            replay: PropagationTrace | None = None) -> ForwardPass:
    d0, stack = sample.inputs()
    h, w = d0.shape
    layout = PatchLayout.for_image(h, w, config.patch_h, config.patch_w)
    if store.patch_size != layout.patch_size:
        raise LearningError(
            f"parameters are for {store.patch_size}-pixel patches, config has {layout.patch_size}"
        )
    feats, init_cache = _init_forward(store, stack, d0)
    trace = run_propagation(gather_patches(feats, layout), d0, sample.sparse, layout,
                            sample.intr, store.propagation_params(), config, replay=replay)
    return ForwardPass(layout, d0, feats, init_cache, trace)


@dataclass(eq=False)
class LossGraph:
    """A recorded forward pass plus the loss gradient w.r.t. each step's depth map."""

    forward: ForwardPass | None
    report: LossReport | None = None
    dreadouts: list | None = None
    clamped: bool = True


def compute_loss(fp: ForwardPass, gt, weight: float = 0.1, kind: str = "l1",
                 clamped: bool = True) -> LossGraph:
    """Loss of the per-step readouts against ``gt``.

    With ``clamped`` False the loss sees the readouts before negative depth
    is clamped to 0. The values agree wherever the prediction is valid, but a
    negative prediction still receives a gradient instead of a zero one.
    """
    if clamped:
        readouts = [r.values for r in fp.trace.readouts]
    else:
        readouts = [scatter_raw(st, fp.layout) for st in fp.trace.states[1:]]
    inter = readouts if weight > 0 else []
    report, dmain, daux = _loss_terms(readouts[-1], inter, gt, weight, kind)
    dread = [np.zeros_like(dmain) for _ in readouts]
    dread[-1] += dmain
    for s, d in enumerate(daux):
        dread[s] += weight * d
    return LossGraph(fp, report, dread, clamped)


# test hook for the gradient checker's negative control
_CORRUPT_BACKWARD: dict = {}


def backward(graph: LossGraph, store: ParamStore) -> None:
    """Accumulate d(total loss)/d(parameter) into ``store.grads``."""
    if graph is None or graph.forward is None or graph.dreadouts is None:
        raise LearningError("backward called before a forward pass and loss were recorded")
    fp = graph.forward
    trace, layout = fp.trace, fp.layout
    params = store.propagation_params()
    steps = len(trace.caches)

    dstate = np.zeros_like(trace.states[-1])
    for s in range(steps - 1, -1, -1):
        state = trace.states[s + 1]
        # readout = max(scatter(state), 0)
        dread = scatter_patches_grad(graph.dreadouts[s], layout)
        dstate = dstate + (dread * (state > 0) if graph.clamped else dread)
        if trace.overwrite is not None:
            dstate = np.where(trace.overwrite, 0.0, dstate)
        dx, grads = edge_attention_backward(trace.caches[s], dstate, params)
        for name, layers in grads.items():
            for i, (dw, db) in enumerate(layers):
                store.grads[f"{name}.{i}.w"] += dw
                store.grads[f"{name}.{i}.b"] += db
        dstate = dx[:, : layout.patch_size]

    dfeat = gather_patches_grad(dstate, layout)
    cols1, h1, cols2 = fp.init_cache
    da1, dw2, db2 = conv3x3_backward(cols2, store["init.conv2.w"], dfeat)
    store.grads["init.conv2.w"] += dw2
    store.grads["init.conv2.b"] += db2
    _, dw1, db1 = conv3x3_backward(cols1, store["init.conv1.w"], da1 * (h1 > 0), need_dx=False)
    store.grads["init.conv1.w"] += dw1
    store.grads["init.conv1.b"] += db1

    for name, factor in _CORRUPT_BACKWARD.items():
        store.grads[name] *= factor


# --------------------------------------------------------------------------
# optimizer and training


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def sgd_adam_step(store: ParamStore, lr: float, moments: AdamState) -> None:
    """Bias-corrected Adam update, in place; clears the gradients afterwards."""
    moments.t += 1
    b1, b2 = moments.beta1, moments.beta2
    c1 = 1.0 - b1 ** moments.t
    c2 = 1.0 - b2 ** moments.t
    for name, p in store.params.items():
        g = store.grads[name]
        m = moments.m.setdefault(name, np.zeros_like(p))
        v = moments.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + moments.eps)
        if not np.all(np.isfinite(p)):
            raise LearningError(f"parameter {name} became non-finite")
    store.zero_grad()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-2
    # geometric decay from lr to lr_final over the run; None keeps lr fixed
    lr_final: float | None = 1e-4
    aux_weight: float = 0.1
    loss: str = "l1"
    seed: int = 0
    hidden: int = 64
    # compute the loss on clamped readouts; off, negative predictions keep a gradient
    clamp_in_loss: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise LearningError("epochs must be >= 0")
        if not self.lr >= 0:
            raise LearningError("learning rate must be >= 0")
        if self.lr_final is not None and not self.lr_final >= 0:
            raise LearningError("final learning rate must be >= 0")
        if self.aux_weight < 0:
            raise LearningError("auxiliary weight must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise LearningError(f"unknown loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_final is None or self.lr == 0 or self.epochs < 2:
            return self.lr
        if self.lr_final == 0:
            return self.lr * (1 - (epoch - 1) / (self.epochs - 1))
        return self.lr * (self.lr_final / self.lr) ** ((epoch - 1) / (self.epochs - 1))


@dataclass
class EpochLog:
    epoch: int
    total: float
    main: float


def train(dataset, config: TrainConfig, prop_config: PropagationConfig,
          store: ParamStore | None = None, callback=None):
    """Per-scene Adam training. Returns (ParamStore, list[EpochLog]).

    The scene order of each epoch is a seeded permutation, so two runs with
    the same seed produce identical parameters and logs.
    """
    dataset = list(dataset)
    if not dataset:
        raise LearningError("training set is empty")
    if store is None:
        store = init_params(prop_config.patch_h, prop_config.patch_w, config.seed, config.hidden)
    rng = np.random.default_rng(config.seed + 1)
    moments = AdamState()
    logs = []
    for epoch in range(1, config.epochs + 1):
        totals, mains = [], []
        lr = config.lr_at(epoch)
        for i in rng.permutation(len(dataset)):
            sample = dataset[i]
            fp = forward(store, sample, prop_config)
            graph = compute_loss(fp, sample.gt, config.aux_weight, config.loss,
                                 config.clamp_in_loss)
            backward(graph, store)
            sgd_adam_step(store, lr, moments)
            totals.append(graph.report.total)
            mains.append(graph.report.main)
        logs.append(EpochLog(epoch, float(np.mean(totals)), float(np.mean(mains))))
        log.info("epoch %d loss %.6f", epoch, logs[-1].total)
        if callback is not None:
            callback(logs[-1])
    return store, logs


def predict(store: ParamStore, sample: Sample, config: PropagationConfig) -> DepthGrid:
    return forward(store, sample, config).final


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheck:
    """Per-tensor outcome of :func:`finite_difference_check`.

    ``rel_error`` is ||analytic - numeric|| / max(||analytic||, ||numeric||,
    GRAD_FLOOR). ``refined`` counts entries whose +-h probe crossed a kink
    and were re-differenced with a smaller step.
    """

    rel_error: float
    max_abs_error: float
    refined: int = 0


def kink_pattern(fp: ForwardPass, gt) -> bytes:
    """Signature of every non-smooth branch taken by a forward pass.

    Covers hidden ReLUs (initializer and MLPs), the readout clamp, and the
    sign / threshold branches of the loss. Two passes with equal signatures
    lie on the same smooth piece of the loss.
    """
    mask = as_array(gt) > 0
    parts = [fp.init_cache[1] > 0]
    for c in fp.trace.caches:
        for cache in (c.self_cache, c.nbr_cache, c.psi_cache):
            if cache is not None:
                parts.extend(z > 0 for z in cache[2][:-1])
    parts.extend(st > 0 for st in fp.trace.states[1:])
    for st in fp.trace.states[1:]:
        for r in (np.maximum(scatter_raw(st, fp.layout), 0.0), scatter_raw(st, fp.layout)):
            e = (r - as_array(gt))[mask]
            parts += [e > 0, np.abs(e) < 1.0]
    return b"".join(np.packbits(np.ravel(q)).tobytes() for q in parts)


def finite_difference_check(store: ParamStore, sample: Sample, config: PropagationConfig,
                            weight: float = 0.1, kind: str = "l1", h: float = 1e-4,
                            max_halvings: int = 12, clamped: bool = True) -> dict:
    """Compare analytic gradients to central differences for every parameter value.

    A central difference is only an estimate of the derivative when both
    probes stay on the same smooth piece as the base point. When +-h crosses
    a ReLU, clamp or loss kink, h is halved for that entry until it no longer
    does (at most ``max_halvings`` times). Returns {name: GradCheck}.
    """
    store.zero_grad()
    fp = forward(store, sample, config)
    backward(compute_loss(fp, sample.gt, weight, kind, clamped), store)
    analytic = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    base = kink_pattern(fp, sample.gt)

    def probe():
        out = forward(store, sample, config, replay=fp.trace)
        loss = compute_loss(out, sample.gt, weight, kind, clamped).report.total
        return loss, kink_pattern(out, sample.gt)

    result = {}
    for name, p in store.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        refined = 0
        for i in range(flat.size):
            keep, step, halvings = flat[i], h, 0
            while True:
                flat[i] = keep + step
                up, kup = probe()
                flat[i] = keep - step
                down, kdown = probe()
                flat[i] = keep
                if (kup == base and kdown == base) or halvings == max_halvings:
                    break
                step, halvings = step / 2, halvings + 1
            refined += halvings > 0
            nflat[i] = (up - down) / (2 * step)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), GRAD_FLOOR)
        result[name] = GradCheck(float(np.linalg.norm(a - num) / denom),
                                 float(np.abs(a - num).max()), refined)
    return result


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"GCSP"
VERSION = 1


def save_checkpoint(store: ParamStore, path) -> None:
    """Write parameters as: magic, version byte, u32 record count, then records of
    (u32 name length, utf-8 name, u8 rank, u32 dims, float64 LE payload)."""
    parts = [MAGIC, struct.pack("<BI", VERSION, len(store.params))]
    for name, arr in store.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: parameter {name} is not finite")
        store.add(name, arr)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return store
