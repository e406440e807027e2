"""Evaluation driver: runs numerical optimization (LO), prediction (LP) and
prediction+correction (LPC) over a held-out pair range, computes the metric
battery against the LO maps, and writes report.csv, a key=value summary, and
log-det-J histogram CSVs.

Deformation errors are measured inside the image-support mask (the desk
analog of evaluating within a brain mask) and pooled across cases; per-case
medians are also emitted.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .evaluate import (
    DEFAULT_PERCENTILES,
    deformation_error_percentiles,
    detj_positive_ratio,
    energy_report,
    histogram_difference,
    logdetj_histogram,
    nearest_rank_percentiles,
    timing_report,
    write_histogram_csv,
    write_report_csv,
    write_summary,
)
from .grid import DeformationMap, ScalarImage, VectorField, identity_map, min_interior_detj
from .kernel import make_kernel
from .network import load_qsnet
from .optimize import OptimizeConfig, RegistrationProblem, energy_parts, optimize
from .patches import PatchSpec
from .predict import mc_predict, predict_corrected, predict_full
from .shooting import ShootingConfig, integrate_arrays
from .synth import load_manifest


def _optimize_case(payload):
    (moving, target, sizes, spacing, dim, kcfg, sigma, steps, ocfg_kw) = payload
    from .grid import GridGeometry

    geom = GridGeometry(dim, sizes, spacing)
    kernel = make_kernel(geom, *kcfg)
    prob = RegistrationProblem(
        ScalarImage(geom, moving), ScalarImage(geom, target), kernel,
        sigma=sigma, shooting=ShootingConfig(steps),
    )
    t0 = time.perf_counter()
    res = optimize(prob, OptimizeConfig(**ocfg_kw))
    wall = time.perf_counter() - t0
    _, Q, _, _ = integrate_arrays(res.m0.data, kernel, prob.shooting,
                                  need_phi=False)
    return dict(m0=res.m0.data, Q=Q, trace=res.energy_trace,
                converged=res.converged, wall=wall)


def run_evaluation(dataset, pair_range, lp_net_path, corr_net_path, out_dir,
                   cfg, mc_samples=0):
    os.makedirs(out_dir, exist_ok=True)
    tuples = load_manifest(os.path.join(dataset, "manifest.txt"))
    if pair_range:
        tuples = tuples[pair_range[0]:pair_range[1]]
    if not tuples:
        raise ValueError("no pairs selected for evaluation")
    geom = tuples[0][0].geom
    kernel = make_kernel(geom, cfg["kernel.a"], cfg["kernel.b"], cfg["kernel.c"])
    shooting = ShootingConfig(cfg["shoot.steps"], cfg["shoot.integrator"])
    spec = PatchSpec(cfg["patch.size"], cfg["patch.stride"],
                     cfg["patch.prune_threshold"])
    lp_net = load_qsnet(lp_net_path)
    corr_net = load_qsnet(corr_net_path) if corr_net_path else None
    tau = cfg["patch.prune_threshold"]
    workers = int(cfg.get("workers", 1))
    ocfg_kw = dict(max_iters=cfg["opt.max_iters"], grad_tol=cfg["opt.grad_tol"],
                   ls_shrink=cfg["opt.ls_shrink"], ls_c1=cfg["opt.ls_c1"],
                   step0=cfg["opt.step0"])

    payloads = [
        (mv.data, tg.data, geom.sizes, geom.spacing, geom.dim,
         (cfg["kernel.a"], cfg["kernel.b"], cfg["kernel.c"]),
         cfg["sigma"], cfg["shoot.steps"], ocfg_kw)
        for mv, tg, _, _ in tuples
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            lo_results = list(ex.map(_optimize_case, payloads))
    else:
        lo_results = [_optimize_case(p) for p in payloads]

    methods = ["LP"] + (["LPC"] if corr_net else [])
    cases = []
    id_map = identity_map(geom)
    for i, ((moving, target, m_true, _), lo) in enumerate(zip(tuples, lo_results)):
        mask = (moving.data >= tau) | (target.data >= tau)
        Q_lo = DeformationMap(geom, lo["Q"])
        rec = {"case": i, "mask": mask,
               "LO": dict(m0=VectorField(geom, lo["m0"]), map=Q_lo,
                          wall=lo["wall"], trace=lo["trace"],
                          converged=lo["converged"])}
        preds = {"LP": predict_full(lp_net, moving, target, spec)}
        if corr_net:
            preds["LPC"] = predict_corrected(lp_net, corr_net, moving, target,
                                             spec, kernel, shooting)
        for name, pr in preds.items():
            _, Q, _, _ = integrate_arrays(pr.momentum.data, kernel, shooting,
                                          need_phi=False)
            rec[name] = dict(m0=pr.momentum, map=DeformationMap(geom, Q),
                             wall=pr.wall_time, pruned=pr.n_patches_pruned)
        rec["identity"] = dict(map=id_map)
        cases.append(rec)

    # pooled deformation-error percentiles vs the LO maps
    pooled = {}
    per_case_median = {name: [] for name in methods + ["identity"]}
    for name in methods + ["identity"]:
        pooled[name] = deformation_error_percentiles(
            [c[name]["map"] for c in cases],
            [c["LO"]["map"] for c in cases],
            mask=[c["mask"] for c in cases],
        )
        for c in cases:
            err = np.linalg.norm(c[name]["map"].coords - c["LO"]["map"].coords,
                                 axis=-1)[c["mask"]]
            per_case_median[name].append(
                nearest_rank_percentiles(err, (50.0,))[50.0])

    detj = {name: detj_positive_ratio([c[name]["map"] for c in cases])
            for name in ["LO"] + methods}

    problems = [
        RegistrationProblem(mv, tg, kernel, sigma=cfg["sigma"], shooting=shooting)
        for mv, tg, _, _ in tuples
    ]
    energies = energy_report(
        problems, {name: [c[name]["m0"] for c in cases]
                   for name in ["LO"] + methods})

    hists = {name: logdetj_histogram([c[name]["map"] for c in cases])
             for name in ["LO"] + methods}
    for name, h in hists.items():
        write_histogram_csv(h, os.path.join(out_dir, f"logdetj_{name}.csv"))
        if name != "LO":
            write_histogram_csv(
                h, os.path.join(out_dir, f"logdetj_{name}_minus_LO.csv"),
                counts=histogram_difference(h, hists["LO"]))

    timings = {"LO": float(np.mean([c["LO"]["wall"] for c in cases]))}
    for name in methods:
        timings[name] = float(np.mean([c[name]["wall"] for c in cases]))
    timing = timing_report(timings, baseline="LO",
                           patches_pruned=sum(c["LP"]["pruned"] for c in cases))

    rows = []
    per_case_energy = energies["_per_case"]
    for c in cases:
        for name in ["LO"] + methods:
            rows.append((
                c["case"], name,
                per_case_median[name][c["case"]] if name != "LO" else 0.0,
                min_interior_detj(c[name]["map"]), None,
                per_case_energy[name][c["case"]],
                c[name]["wall"],
            ))
    write_report_csv(rows, os.path.join(out_dir, "report.csv"))

    summary = {}
    for name in methods + ["identity"]:
        summary[f"median_error_{name}"] = pooled[name][50.0]
    for name, ratio in detj.items():
        summary[f"detj_positive_ratio_{name}"] = ratio
    for name in ["initial", "LO"] + methods:
        mean, std = energies[name]
        summary[f"energy_mean_{name}"] = mean
        summary[f"energy_std_{name}"] = std
    for name, secs in timings.items():
        summary[f"wall_mean_{name}"] = secs
    for name, fac in timing.get("speedup_over_LO", {}).items():
        summary[f"speedup_{name}"] = fac

    if mc_samples and lp_net.dropout_p > 0:
        moving, target, _, _ = tuples[0]
        rng = np.random.default_rng(cfg["seed"])
        res = mc_predict(lp_net, moving, target, spec, kernel, shooting,
                         n_samples=mc_samples, rng=rng)
        from .fileio import write_field
        write_field(res.uncertainty, os.path.join(out_dir, "uncertainty.qsf"),
                    kind="image")
        summary["uncertainty_mean"] = float(res.uncertainty.data.mean())

    write_summary(summary, os.path.join(out_dir, "summary.txt"))
    return summary
