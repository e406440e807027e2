"""Command line driver: make-synthetic, optimize, shoot, train-lp,
train-correct, predict, evaluate.

The pipeline is a DAG of batch steps over QSF/QSNET files; every subcommand
writes a resolved-config snapshot and a run.meta next to its primary output.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import DEFAULTS, load_config, resolve, write_run_meta, write_snapshot
from .fileio import read_field, write_field
from .grid import DeformationMap, GridGeometry, ScalarImage, VectorField
from .kernel import make_kernel
from .network import RegressionNet, TrainConfig, load_qsnet, save_qsnet, train
from .optimize import OptimizeConfig, RegistrationProblem, optimize
from .patches import PatchBatch, PatchSpec, extract, prune_background
from .predict import (
    build_correction_dataset,
    collate_correction_entries,
    mc_predict,
    predict_corrected,
    predict_full,
)
from .shooting import ShootingConfig, shoot
from .synth import SynthConfig, generate_pairs, load_manifest


def _parse_kernel(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected a,b,c")
    return parts


def _parse_sizes(text):
    return tuple(int(v) for v in text.split(","))


def _parse_range(text):
    lo, hi = text.split(":")
    return int(lo), int(hi)


def _cfg_from_args(args):
    file_cfg = load_config(args.config) if args.config else None
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return resolve(file_cfg, overrides)


def _snapshot(cfg, primary_output, command, t0):
    out_dir = os.path.dirname(os.path.abspath(primary_output)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_snapshot(cfg, os.path.join(out_dir, "run.config"))
    write_run_meta(os.path.join(out_dir, "run.meta"), {
        "version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "wall_seconds": f"{time.perf_counter() - t0:.3f}",
    })


def _patch_spec(cfg):
    return PatchSpec(cfg["patch.size"], cfg["patch.stride"],
                     cfg["patch.prune_threshold"])


def _shooting(cfg):
    return ShootingConfig(cfg["shoot.steps"], cfg["shoot.integrator"])


def _kernel_from_cfg(geom, cfg):
    return make_kernel(geom, cfg["kernel.a"], cfg["kernel.b"], cfg["kernel.c"])


def _write_trace(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    geom = GridGeometry(len(args.size), args.size, (1.0,) * len(args.size))
    scfg = SynthConfig(
        geom, n_pairs=args.n, momentum_scale=cfg["synth.momentum_scale"],
        smoothness=cfg["synth.smoothness"], template=cfg["synth.template"],
        seed=cfg["seed"], kernel_a=cfg["kernel.a"], kernel_b=cfg["kernel.b"],
        kernel_c=cfg["kernel.c"], n_steps=cfg["shoot.steps"],
        max_disp=cfg["synth.max_disp"], remap=args.remap,
    )
    manifest = generate_pairs(scfg, args.out, workers=cfg["workers"])
    _snapshot(cfg, manifest, "make-synthetic", t0)
    print(f"wrote {args.n} pairs to {args.out}")
    return 0


def cmd_shoot(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    if args.kernel:
        cfg["kernel.a"], cfg["kernel.b"], cfg["kernel.c"] = args.kernel
    if args.steps:
        cfg["shoot.steps"] = args.steps
    m0 = read_field(args.momentum)
    if not isinstance(m0, VectorField):
        raise ValueError("--momentum must be a vector field")
    kernel = _kernel_from_cfg(m0.geom, cfg)
    state = shoot(m0, kernel, _shooting(cfg))
    write_field(state.phi, args.out_phi, kind="map")
    write_field(state.phi_inv, args.out_phi_inv, kind="map")
    _snapshot(cfg, args.out_phi, "shoot", t0)
    return 0


def cmd_optimize(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    if args.kernel:
        cfg["kernel.a"], cfg["kernel.b"], cfg["kernel.c"] = args.kernel
    for key, val in (("sigma", args.sigma), ("shoot.steps", args.steps),
                     ("opt.max_iters", args.iters)):
        if val is not None:
            cfg[key] = val
    moving = read_field(args.moving)
    target = read_field(args.target)
    kernel = _kernel_from_cfg(moving.geom, cfg)
    prob = RegistrationProblem(moving, target, kernel, sigma=cfg["sigma"],
                               shooting=_shooting(cfg))
    ocfg = OptimizeConfig(max_iters=cfg["opt.max_iters"],
                          grad_tol=cfg["opt.grad_tol"],
                          ls_shrink=cfg["opt.ls_shrink"],
                          ls_c1=cfg["opt.ls_c1"], step0=cfg["opt.step0"])
    res = optimize(prob, ocfg)
    write_field(res.m0, args.out_momentum, kind="momentum")
    if args.trace:
        _write_trace(args.trace, "iter,total,reg,match", res.energy_trace)
    _snapshot(cfg, args.out_momentum, "optimize", t0)
    print(f"optimize: {res.iters_used} iters, converged={res.converged}, "
          f"final total={res.energy_trace[-1][1]:.6g}")
    return 0


def _load_training_batch(dataset_dir, pair_range, spec):
    manifest = os.path.join(dataset_dir, "manifest.txt")
    tuples = load_manifest(manifest)
    if pair_range:
        tuples = tuples[pair_range[0]:pair_range[1]]
    if not tuples:
        raise ValueError("no pairs selected from the dataset")
    batches = []
    for moving, target, momentum, _ in tuples:
        b = prune_background(extract(moving, target, momentum, spec), spec)
        batches.append(b)
    return PatchBatch(
        locations=np.concatenate([b.locations for b in batches]),
        moving=np.concatenate([b.moving for b in batches]),
        target=np.concatenate([b.target for b in batches]),
        momentum=np.concatenate([b.momentum for b in batches]),
    ), tuples


def _train_cfg(cfg, epochs=None, dropout=None):
    return TrainConfig(
        lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        epochs=epochs if epochs is not None else cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        dropout_p=dropout if dropout is not None else cfg["train.dropout"],
        seed=cfg["seed"], weight_decay=cfg["train.weight_decay"],
    )


def cmd_train_lp(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    spec = _patch_spec(cfg)
    batch, _ = _load_training_batch(args.dataset, args.pairs, spec)
    tcfg = _train_cfg(cfg, args.epochs, args.dropout)
    net, trace = train(batch, tcfg)
    save_qsnet(net, args.out)
    if args.trace:
        _write_trace(args.trace, "epoch,l1", trace)
    _snapshot(cfg, args.out, "train-lp", t0)
    print(f"train-lp: {len(batch)} patches, final L1 {trace[-1][1]:.6g}")
    return 0


def cmd_train_correct(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    spec = _patch_spec(cfg)
    lp_net = load_qsnet(args.lp_net)
    manifest = os.path.join(args.dataset, "manifest.txt")
    tuples = load_manifest(manifest)
    if args.pairs:
        tuples = tuples[args.pairs[0]:args.pairs[1]]
    geom = tuples[0][0].geom
    kernel = _kernel_from_cfg(geom, cfg)
    pairs = ((mv, tg, mom) for mv, tg, mom, _ in tuples)
    entries = build_correction_dataset(pairs, lp_net, spec, kernel,
                                       _shooting(cfg), workers=cfg["workers"])
    batch = collate_correction_entries(entries)
    tcfg = _train_cfg(cfg, args.epochs, args.dropout)
    net, trace = train(batch, tcfg)
    save_qsnet(net, args.out)
    if args.trace:
        _write_trace(args.trace, "epoch,l1", trace)
    _snapshot(cfg, args.out, "train-correct", t0)
    print(f"train-correct: {len(batch)} patches, final L1 {trace[-1][1]:.6g}")
    return 0


def cmd_predict(args):
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    spec = _patch_spec(cfg)
    lp_net = load_qsnet(args.lp_net)
    moving = read_field(args.moving)
    target = read_field(args.target)
    kernel = _kernel_from_cfg(moving.geom, cfg)
    shooting = _shooting(cfg)
    workers = cfg["workers"]
    if args.samples:
        rng = np.random.default_rng(cfg["seed"])
        res = mc_predict(lp_net, moving, target, spec, kernel, shooting,
                         n_samples=args.samples, rng=rng, workers=workers)
        if args.out_uncertainty:
            write_field(res.uncertainty, args.out_uncertainty, kind="image")
    elif args.corr_net:
        corr = load_qsnet(args.corr_net)
        res = predict_corrected(lp_net, corr, moving, target, spec, kernel,
                                shooting, workers=workers,
                                correct_iters=args.correct_iters)
    else:
        res = predict_full(lp_net, moving, target, spec, workers=workers)
    write_field(res.momentum, args.out_momentum, kind="momentum")
    _snapshot(cfg, args.out_momentum, "predict", t0)
    print(f"predict: {res.n_patches_predicted} patches predicted, "
          f"{res.n_patches_pruned} pruned, {res.wall_time:.2f}s")
    return 0


def cmd_evaluate(args):
    from .eval_suite import run_evaluation
    t0 = time.perf_counter()
    cfg = _cfg_from_args(args)
    summary = run_evaluation(
        dataset=args.dataset, pair_range=args.pairs, lp_net_path=args.lp_net,
        corr_net_path=args.corr_net, out_dir=args.out_dir, cfg=cfg,
        mc_samples=args.samples,
    )
    _snapshot(cfg, os.path.join(args.out_dir, "report.csv"), "evaluate", t0)
    for key, val in summary.items():
        print(f"{key} = {val}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="geoshoot",
        description="Momentum-shooting diffeomorphic registration and "
                    "patch-wise momentum prediction.",
    )
    ap.add_argument("--version", action="version", version=f"geoshoot {__version__}")

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)

    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-synthetic", help="generate a ground-truth dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=DEFAULTS["synth.n_pairs"])
    sp.add_argument("--size", type=_parse_sizes, default=(64, 64))
    sp.add_argument("--remap", action="store_true",
                    help="store targets through a fixed monotone intensity remap")
    common(sp)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("shoot", help="integrate a momentum to its maps")
    sp.add_argument("--momentum", required=True)
    sp.add_argument("--kernel", type=_parse_kernel, metavar="a,b,c")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out-phi", required=True)
    sp.add_argument("--out-phi-inv", required=True)
    common(sp)
    sp.set_defaults(func=cmd_shoot)

    sp = sub.add_parser("optimize", help="numerically optimize a registration")
    sp.add_argument("--moving", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--kernel", type=_parse_kernel, metavar="a,b,c")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--out-momentum", required=True)
    sp.add_argument("--trace", help="energy trace CSV (iter,total,reg,match)")
    common(sp)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("train-lp", help="train the prediction network")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pairs", type=_parse_range, metavar="LO:HI")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace", help="loss trace CSV (epoch,l1)")
    common(sp)
    sp.set_defaults(func=cmd_train_lp)

    sp = sub.add_parser("train-correct", help="train the correction network")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pairs", type=_parse_range, metavar="LO:HI")
    sp.add_argument("--lp-net", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    common(sp)
    sp.set_defaults(func=cmd_train_correct)

    sp = sub.add_parser("predict", help="predict a momentum for an image pair")
    sp.add_argument("--lp-net", required=True)
    sp.add_argument("--corr-net")
    sp.add_argument("--samples", type=int, default=0,
                    help="Monte-Carlo dropout samples (0 = deterministic)")
    sp.add_argument("--correct-iters", type=int, default=1)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out-momentum", required=True)
    sp.add_argument("--out-uncertainty")
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="run the evaluation battery")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pairs", type=_parse_range, metavar="LO:HI")
    sp.add_argument("--lp-net", required=True)
    sp.add_argument("--corr-net")
    sp.add_argument("--samples", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
