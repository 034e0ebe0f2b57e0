"""``gcspn`` command line: gen, train, infer, eval, gradcheck, ablate.

Every subcommand reads an optional flat ``key = value`` config file
(``--config``), then the ``GCSPN_SEED`` environment variable, then
``key=value`` overrides and flags from the command line, in that order.
Failures print one line ``gcspn: error[<kind>]: <message>`` on stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plots
from .geometry import GeometryError
from .graph import GraphError
from .grid import (
    CameraIntrinsics,
    DepthGrid,
    GridError,
    PfmError,
    ensure_dir,
    read_pfm,
    write_pfm,
    write_pgm16,
)
from .learning import (
    CheckpointError,
    LearningError,
    Sample,
    TrainConfig,
    finite_difference_check,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .propagation import PropagationConfig, PropagationError
from .synth_eval import (
    METRIC_FIELDS,
    MetricsError,
    SceneError,
    evaluate,
    format_metric,
    mean_metrics,
    random_scene,
    render_scene,
    sample_sparse,
    write_metrics_csv,
)

DEFAULTS = {
    "seed": 0,
    "data_dir": "data",
    "out_dir": "out",
    "checkpoint": "",          # empty -> <out_dir>/model.gcsp
    "pred_dir": "",            # empty -> <out_dir>/pred
    "split": "test",           # train | test | all
    # scene generation
    "train_scenes": 20,
    "test_scenes": 5,
    "height": 64,
    "width": 64,
    "near": 0.5,
    "far": 10.0,
    "sparsity": 500,
    # propagation
    "steps": 3,
    "k": 8,
    "patch_h": 4,
    "patch_w": 4,
    "position_scale": 10.0,
    "reimpose_sparse": False,
    "attention": True,
    "geometry": True,
    "dynamic": True,
    # training
    "epochs": 100,
    "lr": 1e-2,
    "lr_final": 1e-4,          # "none" keeps lr fixed
    "aux_weight": 0.1,
    "loss": "l1",
    "hidden": 64,
    "clamp_in_loss": False,
    # outputs and checks
    "max_depth": 10.0,         # PGM full-scale depth
    "gradcheck_h": 1e-4,
    "gradcheck_tol": 1e-4,
}
OPTIONAL = {"lr_final"}
MANIFEST_FIELDS = ("name", "split", "seed", "sample_seed", "height", "width",
                   "f_p", "f_q", "c_p", "c_q")
STEP_SWEEP = (1, 2, 3, 4, 5, 6)
K_SWEEP = (4, 8, 16)
SPARSITY_SWEEP = (200, 400, 500, 600, 800)
TOGGLES = (("full", {}), ("no_attention", {"attention": False}),
           ("no_geometry", {"geometry": False}), ("static_graph", {"dynamic": False}))


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(key: str, text: str):
    text = text.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown key {key!r}")
    if key in OPTIONAL and text.lower() in ("none", ""):
        return None
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = _parse_value(key, value)
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return out


def resolve_config(path=None, overrides=(), env=None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        cfg.update(read_config_file(path))
    env = os.environ if env is None else env
    if env.get("GCSPN_SEED", "").strip():
        cfg["seed"] = _parse_value("seed", env["GCSPN_SEED"])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(key.strip(), value)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["split"] not in ("train", "test", "all"):
        raise ConfigError(f"split must be train, test or all, got {cfg['split']!r}")
    if not cfg["near"] > 0 or not cfg["far"] > cfg["near"]:
        raise ConfigError(f"need 0 < near < far, got near={cfg['near']} far={cfg['far']}")
    for key in ("train_scenes", "test_scenes", "epochs"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    for key in ("height", "width", "steps", "k", "patch_h", "patch_w", "hidden", "sparsity"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not cfg["max_depth"] > 0:
        raise ConfigError("max_depth must be positive")


def prop_config(cfg: dict, **changes) -> PropagationConfig:
    keys = ("steps", "k", "patch_h", "patch_w", "position_scale", "reimpose_sparse",
            "attention", "geometry", "dynamic")
    args = {k: cfg[k] for k in keys}
    args.update(changes)
    return PropagationConfig(**args)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], lr_final=cfg["lr_final"],
                       aux_weight=cfg["aux_weight"], loss=cfg["loss"], seed=cfg["seed"],
                       hidden=cfg["hidden"], clamp_in_loss=cfg["clamp_in_loss"])


def _out(cfg) -> Path:
    p = Path(cfg["out_dir"])
    ensure_dir(p)
    return p


def _checkpoint_path(cfg) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else Path(cfg["out_dir"]) / "model.gcsp"


def _pred_dir(cfg) -> Path:
    return Path(cfg["pred_dir"]) if cfg["pred_dir"] else Path(cfg["out_dir"]) / "pred"


# --------------------------------------------------------------------------
# scene files


@dataclass(frozen=True)
class SceneEntry:
    name: str
    split: str
    seed: int
    sample_seed: int
    intr: CameraIntrinsics
    height: int
    width: int


def scene_seed(run_seed: int, index: int) -> int:
    return run_seed * 1_000_003 + index


def sample_seed(scene: int) -> int:
    # separate stream from every scene seed
    return scene + (1 << 40)


def read_manifest(data_dir) -> list[SceneEntry]:
    path = Path(data_dir) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            SceneEntry(r["name"], r["split"], int(r["seed"]), int(r["sample_seed"]),
                       CameraIntrinsics(float(r["f_p"]), float(r["f_q"]),
                                        float(r["c_p"]), float(r["c_q"])),
                       int(r["height"]), int(r["width"]))
            for r in reader
        ]


def select(entries, split: str) -> list[SceneEntry]:
    chosen = [e for e in entries if split == "all" or e.split == split]
    if not chosen:
        raise ConfigError(f"manifest has no scenes in split {split!r}")
    return chosen


def _read_plane(path) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing file: {path}")
    return read_pfm(path).plane(0)


def load_sample(data_dir, entry: SceneEntry, sparsity: int) -> Sample:
    gt = DepthGrid(_read_plane(Path(data_dir) / f"{entry.name}_gt.pfm"))
    gray = DepthGrid(_read_plane(Path(data_dir) / f"{entry.name}_gray.pfm"))
    return Sample(entry.name, sample_sparse(gt, sparsity, entry.sample_seed), gt, entry.intr, gray)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: dict) -> None:
    data = Path(cfg["data_dir"])
    ensure_dir(data)
    rows = []
    plan = [("train", i) for i in range(cfg["train_scenes"])]
    plan += [("test", i) for i in range(cfg["test_scenes"])]
    for n, (split, i) in enumerate(plan):
        seed = scene_seed(cfg["seed"], n)
        spec = random_scene(seed, cfg["height"], cfg["width"], cfg["near"], cfg["far"])
        depth, gray = render_scene(spec)
        name = f"{split}_{i:03d}"
        write_pfm(depth, data / f"{name}_gt.pfm")
        write_pfm(gray, data / f"{name}_gray.pfm")
        it = spec.intr
        rows.append([name, split, seed, sample_seed(seed), cfg["height"], cfg["width"],
                     repr(it.f_p), repr(it.f_q), repr(it.c_p), repr(it.c_q)])
    with open(data / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    print(f"wrote {len(rows)} scenes to {data}")


def cmd_train(cfg: dict) -> None:
    entries = select(read_manifest(cfg["data_dir"]), "train")
    data = [load_sample(cfg["data_dir"], e, cfg["sparsity"]) for e in entries]
    tc = train_config(cfg)
    t0 = time.perf_counter()
    store, logs = train(data, tc, prop_config(cfg))
    out = _out(cfg)
    ckpt = _checkpoint_path(cfg)
    ensure_dir(ckpt.parent)
    save_checkpoint(store, ckpt)
    with open(out / "loss_log.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr", "total", "main"])
        for l in logs:
            w.writerow([l.epoch, f"{tc.lr_at(l.epoch):.9g}", f"{l.total:.9f}", f"{l.main:.9f}"])
    if logs:
        plots.loss_curve(logs, out / "loss_curve.png")
    final = f"{logs[-1].total:.6f}" if logs else "n/a"
    print(f"trained {len(logs)} epochs on {len(data)} scenes in "
          f"{time.perf_counter() - t0:.1f}s; final loss {final}; checkpoint {ckpt}")


def _load_store(cfg):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_infer(cfg: dict) -> None:
    store = _load_store(cfg)
    pc = prop_config(cfg)
    pred_dir = _pred_dir(cfg)
    ensure_dir(pred_dir)
    entries = select(read_manifest(cfg["data_dir"]), cfg["split"])
    for e in entries:
        pred = predict(store, load_sample(cfg["data_dir"], e, cfg["sparsity"]), pc)
        write_pfm(pred, pred_dir / f"{e.name}_pred.pfm")
        write_pgm16(pred, pred_dir / f"{e.name}_pred.pgm", cfg["max_depth"])
    print(f"wrote {len(entries)} predictions to {pred_dir}")


def cmd_eval(cfg: dict) -> None:
    pred_dir = _pred_dir(cfg)
    rows = []
    for e in select(read_manifest(cfg["data_dir"]), cfg["split"]):
        path = pred_dir / f"{e.name}_pred.pfm"
        if not path.exists():
            raise FileNotFoundError(f"missing prediction for scene {e.name}: {path}")
        gt = _read_plane(Path(cfg["data_dir"]) / f"{e.name}_gt.pfm")
        rows.append((e.name, evaluate(read_pfm(path).plane(0), gt)))
    mean = mean_metrics(r for _, r in rows)
    out = _out(cfg) / "metrics.csv"
    write_metrics_csv(out, rows + [("mean", mean)])
    print("mean " + " ".join(f"{k}={format_metric(v)}" for k, v in zip(METRIC_FIELDS, mean.row())))
    print(f"wrote {out}")


def _gradcheck_sample(seed: int) -> Sample:
    spec = random_scene(seed, 8, 8)
    gt, gray = render_scene(spec)
    return Sample("gradcheck", sample_sparse(gt, 12, seed), gt, spec.intr, gray)


def param_group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "init" else parts[0]


def cmd_gradcheck(cfg: dict) -> None:
    # 8x8 needs small patches for a meaningful graph: 2x2 patches give 16 nodes
    pc = prop_config(cfg, steps=2, k=4, patch_h=2, patch_w=2, record_intermediate=True)
    store = init_params(2, 2, cfg["seed"], cfg["hidden"])
    res = finite_difference_check(store, _gradcheck_sample(cfg["seed"]), pc,
                                  cfg["aux_weight"], cfg["loss"], cfg["gradcheck_h"],
                                  clamped=cfg["clamp_in_loss"])
    groups: dict[str, list] = {}
    for name, r in res.items():
        groups.setdefault(param_group(name), []).append(r)
    tol = cfg["gradcheck_tol"]
    lines = []
    for g, rs in groups.items():
        worst = max(r.rel_error for r in rs)
        lines.append((g, worst, sum(r.refined for r in rs), "ok" if worst < tol else "FAIL"))
    out = _out(cfg) / "gradcheck.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "max_rel_error", "refined_entries", "status"])
        for g, worst, refined, status in lines:
            w.writerow([g, f"{worst:.3e}", refined, status])
    for g, worst, refined, status in lines:
        print(f"{g:<12} max_rel_error={worst:.3e} refined={refined:<4d} {status}")
    failed = [g for g, *_, status in lines if status != "ok"]
    if failed:
        raise CheckFailed(f"gradient check failed for {', '.join(failed)} (tolerance {tol:g})")
    print(f"gradcheck: PASS (tolerance {tol:g})")


def _mean_record(store, samples, pc):
    return mean_metrics(evaluate(predict(store, s, pc), s.gt) for s in samples)


def cmd_ablate(cfg: dict) -> None:
    store = _load_store(cfg)
    entries = select(read_manifest(cfg["data_dir"]), cfg["split"])
    base = [load_sample(cfg["data_dir"], e, cfg["sparsity"]) for e in entries]
    rows = []

    def add(group, pc, sparsity, rec):
        rows.append([group, pc.steps, pc.k, sparsity, int(pc.attention), int(pc.geometry),
                     int(pc.dynamic)] + [format_metric(v) for v in rec.row()])
        return rec.rmse

    grid: dict[int, list] = {}
    for k in K_SWEEP:
        for steps in STEP_SWEEP:
            pc = prop_config(cfg, steps=steps, k=k)
            grid.setdefault(k, []).append((steps, add("steps_k", pc, cfg["sparsity"],
                                                      _mean_record(store, base, pc))))
    sparse_pts = []
    pc = prop_config(cfg)
    for n in SPARSITY_SWEEP:
        samples = [load_sample(cfg["data_dir"], e, n) for e in entries]
        sparse_pts.append((n, add("sparsity", pc, n, _mean_record(store, samples, pc))))
    bars = []
    for label, change in TOGGLES:
        tpc = prop_config(cfg, **change)
        bars.append((label, add(label, tpc, cfg["sparsity"], _mean_record(store, base, tpc))))

    out = _out(cfg)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "steps", "k", "sparsity", "attention", "geometry", "dynamic",
                    *METRIC_FIELDS])
        w.writerows(rows)
    plots.steps_by_k(grid, out / "ablation_steps_k.png")
    plots.sparsity_curve(sparse_pts, out / "ablation_sparsity.png")
    plots.toggle_bars(bars, out / "ablation_toggles.png")
    print(f"wrote {len(rows)} ablation rows and 3 figures to {out}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"gcspn: error[usage]: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gcspn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file; key=value "
                       "arguments anywhere on the line override it")
        if name in ("infer", "ablate", "train"):
            p.add_argument("--steps", type=int)
            p.add_argument("--k", type=int)
            p.add_argument("--no-attention", action="store_true")
            p.add_argument("--no-geometry", action="store_true")
            p.add_argument("--static-graph", action="store_true")
            p.add_argument("--reimpose-sparse", action="store_true")
    return ap


def _flag_overrides(args) -> list[str]:
    out = []
    for key in ("steps", "k"):
        if getattr(args, key, None) is not None:
            out.append(f"{key}={getattr(args, key)}")
    for flag, item in (("no_attention", "attention=false"), ("no_geometry", "geometry=false"),
                       ("static_graph", "dynamic=false"), ("reimpose_sparse", "reimpose_sparse=true")):
        if getattr(args, flag, False):
            out.append(item)
    return out


ERROR_KINDS = (
    (ConfigError, "config", 2),
    (FileNotFoundError, "file-not-found", 3),
    ((PfmError, CheckpointError), "format", 4),
    ((SceneError, MetricsError, LearningError, GraphError, GeometryError, PropagationError,
      GridError), "invalid-input", 5),
    (CheckFailed, "check-failed", 1),
    (OSError, "io", 6),
)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # key=value overrides may appear anywhere after the subcommand
    overrides = [a for a in argv if "=" in a and not a.startswith("-")]
    args = build_parser().parse_args([a for a in argv if a not in overrides])
    try:
        cfg = resolve_config(args.config, overrides + _flag_overrides(args))
        COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to a one-line report
        for types, kind, code in ERROR_KINDS:
            if isinstance(exc, types):
                msg = " ".join(str(exc).split())
                print(f"gcspn: error[{kind}]: {msg}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
