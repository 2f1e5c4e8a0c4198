"""Command line interface: ``selftransfer <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(divergence, failed gradient check).

Any long flag may also come from ``--config FILE``, a plain-text file of
``key = value`` lines whose keys are flag names without the leading dashes.
Flags on the command line override the file, which overrides the built-in
defaults.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GenSpec, generate, import_directory, load
from .errors import ConfigError, DivergenceError, InputError
from .gradcheck import DEFAULT_EPSILON
from .layers import one_hot
from .metrics import bilinear_upsample, evaluate, peak_location, write_report
from .network import (
    PRESETS, AlphaSchedule, NetworkConfig, STLNet, config_to_text, geometry, init_params,
    load_config, preset,
)
from .rng import Rng

log = logging.getLogger("selftransfer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

TABLE1_VARIANTS = (
    ("maxpool", "max", "loc-only"),
    ("avepool", "avg", "loc-only"),
    ("stl-maxpool", "max", "stl"),
    ("stl-avepool", "avg", "stl"),
)
REPORT_COLUMNS = ("accuracy", "auc", "ap_pos", "ap_neg", "loc_ap")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# plumbing

def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_run_manifest(out_dir, args, artifacts, started: float):
    """``run.json``: argv, resolved flags, artifacts, timing and version.

    It records wall-clock data, so it is the one output that differs between
    otherwise identical runs.
    """
    out = Path(out_dir)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": ["selftransfer"] + list(args.argv),
        "subcommand": args.command,
        "config": json.loads(json.dumps(config, default=str)),
        "seed": getattr(args, "seed", None),
        "artifacts": sorted(str(Path(a).relative_to(out)) for a in artifacts),
        "wall_clock_seconds": round(time.time() - started, 3),
        "version": __version__,
    }
    _atomic_write(out / "run.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        else:
            key, _, value = line.partition(" ")
        key = key.strip().lstrip("-")
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key")
        values[key] = (value.strip(), lineno)
    return values


def apply_config_file(sub: argparse.ArgumentParser, path):
    """Turn file entries into parser defaults, converting with each flag's type."""
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, (text, lineno) in read_config_file(path).items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest == "config":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = text.lower() in ("1", "true", "yes", "on", "")
            elif action.nargs is not None and action.nargs not in ("?",):
                conv = action.type or str
                value = [conv(v) for v in text.replace(",", " ").split()]
            else:
                value = (action.type or str)(text)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}:{lineno}: bad value {text!r} for {key!r}") from None
        if action.choices is not None:
            for v in value if isinstance(value, list) else [value]:
                if v not in action.choices:
                    raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def limit_threads(deterministic: bool):
    """Cap BLAS threads at ``STL_THREADS`` (default 1 in deterministic mode)."""
    from threadpoolctl import threadpool_limits

    env = os.environ.get("STL_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"STL_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("STL_THREADS must be >= 1")
        return threadpool_limits(n)
    if deterministic:
        return threadpool_limits(1)
    return None


def resolve_network(args, num_classes=2) -> NetworkConfig:
    if getattr(args, "net_config", None):
        cfg = load_config(args.net_config)
        if getattr(args, "pool", None) and cfg.localizer_head:
            cfg = cfg.with_pool(args.pool)
    else:
        size = None
        if getattr(args, "input", None):
            size = tuple(args.input) * 2 if len(args.input) == 1 else tuple(args.input)
        cfg = preset(args.preset, num_classes, getattr(args, "pool", None), size)
    if getattr(args, "gate", None) and args.gate != cfg.gate:
        cfg = replace(cfg, gate=args.gate)
    return cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# gen-data / import

def cmd_gen_data(args):
    _require(args, "out", "n")
    spec = GenSpec(canvas=tuple(args.canvas) * 2 if len(args.canvas) == 1 else tuple(args.canvas),
                   n_samples=args.n, positive_fraction=args.positive_fraction,
                   target_shape=args.target_shape, target_size=tuple(args.target_size),
                   distractor_count=tuple(args.distractor_count),
                   distractor_size=tuple(args.distractor_size), noise_std=args.noise_std,
                   background=tuple(args.background),
                   target_intensity=tuple(args.target_intensity),
                   distractor_intensity=tuple(args.distractor_intensity), seed=args.seed)
    spec.validate()
    manifest = generate(spec, args.out)
    out = Path(args.out)
    n_pos = int(manifest.labels.sum())
    print(f"wrote {len(manifest)} samples ({n_pos} positive) to {out / 'manifest.tsv'}")
    return [out / "manifest.tsv"] + [out / r.path for r in manifest.records]


def cmd_import(args):
    _require(args, "src", "labels", "out")
    canvas = tuple(args.canvas) * 2 if len(args.canvas) == 1 else tuple(args.canvas)
    manifest, report = import_directory(args.src, args.labels, args.out, canvas, args.boxes,
                                        args.classes, args.seed)
    out = Path(args.out)
    print(f"imported {len(report.imported)} images, skipped {len(report.skipped)}")
    for name, reason in report.skipped:
        print(f"  skipped {name}: {reason}", file=sys.stderr)
    return [out / "manifest.tsv", out / "import_report.csv"] + [out / r.path for r in manifest.records]


# ---------------------------------------------------------------------------
# train

def train_config_from(args, seed=None, mode=None):
    from .trainer import TrainConfig

    mode = mode or args.mode
    if mode == "cls-only":
        schedule = AlphaSchedule.constant(0.0)
    elif mode == "loc-only":
        schedule = AlphaSchedule.constant(1.0)
    else:
        schedule = AlphaSchedule(args.alpha_init, args.alpha_final, args.alpha_switch,
                                 args.alpha_ramp)
    return TrainConfig(base_lr=args.lr, lr_halving_period=args.lr_halve_every,
                       momentum=args.momentum, weight_decay=args.wd, batch_size=args.batch,
                       epochs=args.epochs, alpha_schedule=schedule,
                       seed=args.seed if seed is None else seed,
                       deterministic=not args.no_deterministic, train_ratio=args.train_ratio,
                       init_std=args.init_std, init_scheme=args.init)


def network_for_mode(cfg: NetworkConfig, mode: str) -> NetworkConfig:
    if mode == "cls-only":
        return cfg.without_localizer()
    if mode == "loc-only":
        return cfg.without_classifier()
    return cfg


def _train_once(net_cfg, tcfg, dataset, out: Path, wd_grid=None, tag=""):
    """Train (optionally over a weight-decay grid) and write checkpoint, log and plot."""
    from .plotting import plot_training_curves
    from .trainer import grid_search_weight_decay, train, write_log_csv

    out.mkdir(parents=True, exist_ok=True)
    progress = lambda r: log.info("%sepoch %d alpha %.2f loss %.4f val cls %.3f loc %.3f",  # noqa: E731
                                  tag, r.epoch, r.alpha, r.loss_total, r.val_acc_cls,
                                  r.val_acc_loc)
    artifacts = []
    if wd_grid:
        (best_wd, result), runs = grid_search_weight_decay(net_cfg, tcfg, dataset, wd_grid,
                                                           progress)
        with open(out / "wd_grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("weight_decay", "best_epoch", "val_accuracy", "diverged"))
            for wd, res in runs:
                w.writerow((repr(wd), res.best.epoch, repr(res.best.val_accuracy),
                            int(res.diverged)))
        artifacts.append(out / "wd_grid.csv")
        print(f"{tag}weight decay grid: selected {best_wd!r}")
    else:
        result = train(net_cfg, tcfg, dataset, progress=progress)
    save_checkpoint(result.best, out / "best.stlw")
    write_log_csv(result.log, out / "train_log.csv")
    artifacts += [out / "best.stlw", out / "train_log.csv"]
    if result.log:
        plot_training_curves(result.log, out / "train_curves.png", tag.strip(" :"))
        artifacts.append(out / "train_curves.png")
    return result, artifacts


def cmd_train(args):
    _require(args, "train", "out")
    if args.suite:
        return run_suite(args)
    dataset = load(args.train, "train")
    net_cfg = network_for_mode(resolve_network(args, dataset.num_classes), args.mode)
    tcfg = train_config_from(args)
    out = Path(args.out)
    grid = args.wd_grid if args.wd_grid else None
    result, artifacts = _train_once(net_cfg, tcfg, dataset, out, grid)
    (out / "network.cfg").write_text(config_to_text(net_cfg), encoding="utf-8")
    artifacts.append(out / "network.cfg")
    if result.diverged:
        raise DivergenceError(f"training diverged at {result.message}; "
                              f"kept checkpoint from epoch {result.best.epoch}")
    print(f"best epoch {result.best.epoch}, validation accuracy "
          f"{result.best.val_accuracy:.4f}; checkpoint {out / 'best.stlw'}")
    return artifacts


def _median(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else float("nan")


def run_suite(args):
    """Four-variant comparison over several seeds on shared train/test data."""
    from .metrics import fmt
    from .plotting import plot_suite

    if args.suite != "table1":
        raise UsageError(f"unknown suite {args.suite!r}")
    _require(args, "test")
    seeds = [int(s) for s in str(args.seeds).replace(",", " ").split()]
    train_set = load(args.train, "train")
    test_set = load(args.test, "eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "suite_inputs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("role", "samples", "manifest_sha256"))
        for role, path, ds in (("train", args.train, train_set), ("test", args.test, test_set)):
            w.writerow((role, len(ds), hashlib.sha256(Path(path).read_bytes()).hexdigest()))
    artifacts, runs = [out / "suite_inputs.csv"], []
    for seed in seeds:
        for variant, pool, mode in TABLE1_VARIANTS:
            sub_seed = Rng(seed).spawn(variant).seed
            args.pool = pool
            net_cfg = network_for_mode(resolve_network(args, train_set.num_classes), mode)
            tcfg = train_config_from(args, sub_seed, mode)
            run_dir = out / variant / f"seed{seed}"
            t0 = time.time()
            result, arts = _train_once(net_cfg, tcfg, train_set, run_dir,
                                       tag=f"{variant} seed {seed}: ")
            artifacts += arts
            if result.diverged:
                raise DivergenceError(f"{variant} seed {seed} diverged at {result.message}")
            report = evaluate(result.best.to_net(), test_set)
            write_report(report, run_dir)
            artifacts += [run_dir / n for n in ("report.csv", "pr_cls.csv", "pr_loc.csv",
                                                "scores.csv")]
            row = {"variant": variant, "seed": seed, "sub_seed": sub_seed,
                   "best_epoch": result.best.epoch}
            row.update({k: getattr(report, k) for k in REPORT_COLUMNS})
            runs.append(row)
            log.info("%s seed %d took %.0fs", variant, seed, time.time() - t0)
            print(f"{variant:12s} seed {seed}: " +
                  " ".join(f"{k}={row[k]:.4f}" for k in REPORT_COLUMNS), flush=True)
    with open(out / "table1_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "seed", "sub_seed", "best_epoch") + REPORT_COLUMNS)
        for r in runs:
            w.writerow([r["variant"], r["seed"], r["sub_seed"], r["best_epoch"]] +
                       [fmt(r[k]) for k in REPORT_COLUMNS])
    summary = []
    for variant, _, _ in TABLE1_VARIANTS:
        sel = [r for r in runs if r["variant"] == variant]
        summary.append({"variant": variant, "seeds": len(sel),
                        **{k: _median([r[k] for r in sel]) for k in REPORT_COLUMNS}})
    with open(out / "table1.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "seeds") + REPORT_COLUMNS)
        for s in summary:
            w.writerow([s["variant"], s["seeds"]] + [fmt(s[k]) for k in REPORT_COLUMNS])
    plot_suite(summary, runs, out / "table1.png")
    artifacts += [out / "table1_runs.csv", out / "table1.csv", out / "table1.png"]
    print(f"median over {len(seeds)} seed(s):")
    for s in summary:
        print(f"  {s['variant']:12s} " + " ".join(f"{k}={s[k]:.4f}" for k in REPORT_COLUMNS))
    return artifacts


# ---------------------------------------------------------------------------
# eval / export-maps

def _checkpoint_net(path):
    ckpt = load_checkpoint(path)
    return ckpt.to_net()


def cmd_eval(args):
    from .plotting import plot_pr_curves

    _require(args, "checkpoint", "data", "out")
    net = _checkpoint_net(args.checkpoint)
    dataset = load(args.data, "eval")
    if dataset.boxes is None or not any(dataset.boxes):
        log.warning("manifest has no boxes; localization metrics are omitted")
    report = evaluate(net, dataset, args.tolerance, args.metric)
    out = Path(args.out)
    write_report(report, out)
    artifacts = [out / "report.csv", out / "pr_cls.csv", out / "scores.csv"]
    if report.pr_loc is not None:
        artifacts.append(out / "pr_loc.csv")
    plot_pr_curves(report.pr_cls, report.pr_loc, out / "pr_curves.png")
    artifacts.append(out / "pr_curves.png")
    for k in REPORT_COLUMNS:
        v = getattr(report, k)
        if v is not None:
            print(f"{k:9s} {v:.4f}" if not math.isnan(v) else f"{k:9s} undefined")
    return artifacts


def scale_map(upsampled: np.ndarray, prob: float) -> np.ndarray:
    """Map the minimum to 0 and the maximum to round(255 * prob); a flat map is all maximum."""
    top = math.floor(255.0 * prob + 0.5)
    lo, hi = float(upsampled.min()), float(upsampled.max())
    if hi == lo:
        return np.full(upsampled.shape, top, dtype=np.uint8)
    scaled = (upsampled - lo) / (hi - lo) * top
    return np.floor(scaled + 0.5).astype(np.uint8)


def cmd_export_maps(args):
    from .pgm import write_pgm
    from .plotting import plot_score_map
    from .trainer import predict

    _require(args, "checkpoint", "data", "out")
    net = _checkpoint_net(args.checkpoint)
    if not net.localizer:
        raise ConfigError("checkpoint has no localizer head, so there are no score maps")
    dataset = load(args.data, "eval")
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    if args.ids:
        wanted = [s for s in args.ids.replace(",", " ").split()]
        missing = [s for s in wanted if s not in index]
        if missing:
            raise UsageError(f"unknown sample id(s): {', '.join(missing)}")
        chosen = [index[s] for s in wanted]
    else:
        chosen = list(range(min(args.limit, len(dataset))))
    sub = dataset.subset(chosen)
    _, y_loc, maps = predict(net, sub.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    size = net.config.input_size
    for i, sid in enumerate(sub.ids):
        prob = float(y_loc[i, 1])
        up = bilinear_upsample(maps[i, 1], size)
        scaled = scale_map(up, prob)
        write_pgm(out / f"{sid}_map.pgm", scaled)
        np.savetxt(out / f"{sid}_map.csv", up, delimiter=",", fmt="%.17g")
        peak = peak_location(up)
        plot_score_map(sub.images[i, 0], scaled, peak, sub.boxes[i] if sub.boxes else None,
                       out / f"{sid}_overlay.png",
                       f"{sid}  label {sub.labels[i]}  p(pos) {prob:.3f}")
        artifacts += [out / f"{sid}_map.pgm", out / f"{sid}_map.csv", out / f"{sid}_overlay.png"]
    print(f"exported {len(sub.ids)} score maps to {out}")
    return artifacts


# ---------------------------------------------------------------------------
# gradcheck / inspect

def cmd_gradcheck(args):
    from .gradcheck import gradient_check

    cfg = resolve_network(args)
    net = STLNet(cfg, np.float64)
    root = Rng(args.seed)
    init_params(net, root.spawn("init"), scheme="fan_in")
    x = root.spawn("input").uniform((args.batch, cfg.in_channels) + cfg.input_size)
    labels = np.arange(args.batch) % cfg.num_classes
    worst = 0.0
    rows = []
    for alpha in args.alpha:
        report = gradient_check(net, x, one_hot(labels, cfg.num_classes), alpha, args.epsilon,
                                args.fraction, root.spawn("subsample"))
        worst = max(worst, report.max_rel_error)
        print(f"alpha {alpha}: max relative error {report.max_rel_error:.3e} over "
              f"{report.checked} elements ({report.excluded} excluded at kinks/ties)")
        for layer, err in report.per_layer().items():
            print(f"  {layer:10s} {err:.3e}")
            rows.append((repr(alpha), layer, repr(err)))
    artifacts = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("alpha", "layer", "max_rel_error"))
            w.writerows(rows)
        artifacts.append(out / "gradcheck.csv")
    if not worst < args.threshold:
        raise GradientCheckFailed(f"max relative error {worst:.3e} exceeds {args.threshold:g}")
    return artifacts


class GradientCheckFailed(RuntimeError):
    pass


def cmd_inspect(args):
    if args.checkpoint:
        cfg = load_checkpoint(args.checkpoint).config
    else:
        cfg = resolve_network(args)
    geo = geometry(cfg)
    size = cfg.input_size
    net = STLNet(cfg)
    print(f"network          {cfg.name}")
    print(f"input            {size[0]}x{size[1]}x{cfg.in_channels}")
    print(f"global stride    {geo.stride}")
    print(f"receptive field  {geo.receptive_field[0]}x{geo.receptive_field[1]}")
    if cfg.localizer_head:
        mh, mw = geo.map_dims(size)
        print(f"score maps       {cfg.num_classes}x{mh}x{mw} ({cfg.pool_kind})")
        print(f"tolerance        {geo.stride // 2} px")
    print(f"parameters       {net.num_params()}")
    for p in net.params:
        print(f"  {p.name:14s} {'x'.join(str(d) for d in p.value.shape)}")
    return []


# ---------------------------------------------------------------------------
# parser

def _network_flags(p):
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--net-config", help="network description file (overrides --preset)")
    p.add_argument("--pool", choices=("max", "avg"),
                   help="global pooling of the localizer head (default: the preset's)")
    p.add_argument("--input", type=int, nargs="+", metavar="N",
                   help="input size: N or H W (preset default otherwise)")
    p.add_argument("--gate", choices=("relu", "clamp"),
                   help="junction rule: gate on activation (relu) or clamp the summed error")


def build_parser():
    parser = argparse.ArgumentParser(prog="selftransfer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file of flag defaults")
        p.set_defaults(func=func)
        return p

    g = sub("gen-data", cmd_gen_data, "generate a synthetic weakly labeled dataset")
    d = GenSpec()
    g.add_argument("--out")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, nargs="+", default=list(d.canvas), metavar="N")
    g.add_argument("--positive-fraction", type=float, default=d.positive_fraction)
    g.add_argument("--target-shape", choices=("ring", "bar", "blob"), default=d.target_shape)
    g.add_argument("--target-size", type=int, nargs=2, default=list(d.target_size))
    g.add_argument("--distractor-count", type=int, nargs=2, default=list(d.distractor_count))
    g.add_argument("--distractor-size", type=int, nargs=2, default=list(d.distractor_size))
    g.add_argument("--noise-std", type=float, default=d.noise_std)
    g.add_argument("--background", type=float, nargs=2, default=list(d.background))
    g.add_argument("--target-intensity", type=float, nargs=2, default=list(d.target_intensity))
    g.add_argument("--distractor-intensity", type=float, nargs=2,
                   default=list(d.distractor_intensity))

    i = sub("import", cmd_import, "import a directory of PGM images with a labels CSV")
    i.add_argument("--src")
    i.add_argument("--labels", help="CSV of filename,label")
    i.add_argument("--boxes", help="CSV of filename,x0,y0,x1,y1 (optional)")
    i.add_argument("--out")
    i.add_argument("--canvas", type=int, nargs="+", default=[500], metavar="N")
    i.add_argument("--classes", type=int, default=2)
    i.add_argument("--seed", type=int, default=0)

    t = sub("train", cmd_train, "train a network (or the four-variant suite)")
    t.add_argument("--train", help="training manifest")
    t.add_argument("--out")
    _network_flags(t)
    t.add_argument("--mode", choices=("stl", "cls-only", "loc-only"), default="stl")
    t.add_argument("--epochs", type=int, default=90)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--lr-halve-every", type=int, default=30)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--wd", type=float, default=5e-4)
    t.add_argument("--wd-grid", type=float, nargs="*",
                   help="weight decays to compare on validation accuracy "
                        "(no values: 1e-3 5e-4 1e-4)")
    t.add_argument("--alpha-init", type=float, default=0.1)
    t.add_argument("--alpha-final", type=float, default=0.9)
    t.add_argument("--alpha-switch", type=int, default=60)
    t.add_argument("--alpha-ramp", type=int, default=0,
                   help="epochs of linear transition after the switch (0: hard step)")
    t.add_argument("--init", choices=("fan_in", "gaussian"), default="fan_in",
                   help="weight init: fan_in scaling or N(0, init-std^2)")
    t.add_argument("--init-std", type=float, default=0.01)
    t.add_argument("--train-ratio", type=float, default=0.8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-deterministic", action="store_true",
                   help="allow multi-threaded BLAS when STL_THREADS is unset")
    t.add_argument("--suite", choices=("table1",),
                   help="run MaxPool/AvePool/STL+MaxPool/STL+AvePool over --seeds")
    t.add_argument("--test", help="evaluation manifest for --suite")
    t.add_argument("--seeds", default="0,1,2,3,4")

    e = sub("eval", cmd_eval, "evaluate a checkpoint on a manifest with boxes")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--tolerance", type=float, help="pixels (default: half the global stride)")
    e.add_argument("--metric", choices=("chebyshev", "euclidean"), default="chebyshev")

    x = sub("export-maps", cmd_export_maps, "write upsampled positive-class score maps")
    x.add_argument("--checkpoint")
    x.add_argument("--data")
    x.add_argument("--out")
    x.add_argument("--ids", help="comma separated sample ids (default: first --limit)")
    x.add_argument("--limit", type=int, default=16)

    c = sub("gradcheck", cmd_gradcheck, "finite-difference check of a network's gradients")
    _network_flags(c)
    c.add_argument("--alpha", type=float, nargs="+", default=[0.1, 0.5, 0.9])
    c.add_argument("--fraction", type=float, default=0.01)
    c.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    c.add_argument("--batch", type=int, default=2)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")

    n = sub("inspect", cmd_inspect, "print geometry and parameter shapes")
    _network_flags(n)
    n.add_argument("--checkpoint")
    return parser, subs


def _subparser(subs, argv):
    for token in argv:
        if token in subs.choices:
            return subs.choices[token]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        sp = _subparser(subs, argv)
        if sp is not None:
            pre = argparse.ArgumentParser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv)
            if known.config:
                apply_config_file(sp, known.config)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ConfigError as exc:
        print(f"selftransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "train" and args.wd_grid is not None and not args.wd_grid:
        args.wd_grid = [1e-3, 5e-4, 1e-4]
    started = time.time()
    try:
        limiter = limit_threads(not getattr(args, "no_deterministic", False))
        try:
            artifacts = args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
        out = getattr(args, "out", None)
        if out and artifacts:
            write_run_manifest(out, args, artifacts, started)
        return EXIT_OK
    except (UsageError, ConfigError, InputError) as exc:
        print(f"selftransfer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PermissionError as exc:
        print(f"selftransfer {args.command}: error: cannot write {exc.filename}: "
              f"{exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"selftransfer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, GradientCheckFailed) as exc:
        print(f"selftransfer {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
