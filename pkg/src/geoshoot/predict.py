"""Full-image momentum prediction: sliding-window patch regression,
correction-network second stage, and Monte-Carlo dropout sampling with
deformation-uncertainty maps.

The predicted momentum is assembled raw; smoothing happens implicitly when
the momentum is shot (velocity = K momentum).  The correction stage shoots
the first-stage momentum once to warp the target back to the moving frame,
then adds the predicted residual in that fixed frame, so the summed momentum
parameterizes a single geodesic.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import DeformationMap, ScalarImage, VectorField, interp_values
from .kernel import FluidKernelOp
from .network import RegressionNet
from .patches import PatchBatch, PatchSpec, assemble, extract, grid_locations, prune_background
from .shooting import ShootingConfig, ShootingDiverged, integrate_arrays

log = logging.getLogger(__name__)

__all__ = [
    "PredictionResult",
    "CorrectionDatasetEntry",
    "predict_full",
    "build_correction_dataset",
    "collate_correction_entries",
    "predict_corrected",
    "mc_predict",
]


@dataclass(frozen=True, eq=False)
class PredictionResult:
    momentum: VectorField
    samples: list[VectorField] | None
    uncertainty: ScalarImage | None
    n_patches_predicted: int
    n_patches_pruned: int
    wall_time: float

    def __post_init__(self):
        if (self.samples is None) != (self.uncertainty is None):
            raise ValueError("uncertainty must be present iff samples are")
        if self.uncertainty is not None and (self.uncertainty.data < 0).any():
            raise ValueError("uncertainty must be non-negative")


@dataclass(frozen=True, eq=False)
class CorrectionDatasetEntry:
    moving_patch: np.ndarray            # (1, *p)
    warped_back_target_patch: np.ndarray
    residual_momentum_patch: np.ndarray  # (d, *p)


def _forward_patches(net: RegressionNet, moving_p, target_p, mode, rng,
                     workers=1, chunk=256):
    """Run the network over stacked patches in deterministic chunk order."""
    n = moving_p.shape[0]
    if n == 0:
        return np.zeros((0, net.dim) + moving_p.shape[2:])
    xm = moving_p.astype(np.float32)
    xt = target_p.astype(np.float32)
    chunks = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if workers > 1 and len(chunks) > 1 and mode == "deterministic":
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(
                lambda c: net.forward(xm[c[0]:c[1]], xt[c[0]:c[1]], mode),
                chunks))
    else:
        parts = [net.forward(xm[lo:hi], xt[lo:hi], mode, rng) for lo, hi in chunks]
    return np.concatenate(parts, axis=0).astype(np.float64)


def predict_full(net: RegressionNet, moving: ScalarImage, target: ScalarImage,
                 spec: PatchSpec, mode: str = "deterministic",
                 rng: np.random.Generator | None = None,
                 workers: int = 1) -> PredictionResult:
    """extract -> prune -> per-patch regression -> overlap-averaged assembly."""
    t0 = time.perf_counter()
    batch = prune_background(extract(moving, target, None, spec), spec)
    total = len(grid_locations(moving.geom, spec))
    pred = _forward_patches(net, batch.moving, batch.target, mode, rng, workers)
    momentum = assemble(pred, batch.locations, moving.geom)
    return PredictionResult(
        momentum=momentum,
        samples=None,
        uncertainty=None,
        n_patches_predicted=len(batch),
        n_patches_pruned=total - len(batch),
        wall_time=time.perf_counter() - t0,
    )


def _shoot_maps(momentum: np.ndarray, kernel: FluidKernelOp,
                shooting: ShootingConfig, need_phi: bool):
    m, Q, P, _ = integrate_arrays(momentum, kernel, shooting, need_phi=need_phi)
    return Q, P


def build_correction_dataset(pairs, lp_net: RegressionNet, spec: PatchSpec,
                             kernel: FluidKernelOp, shooting: ShootingConfig,
                             workers: int = 1):
    """For each (moving, target, true momentum) training tuple: predict with
    the first-stage net, shoot, warp the target back to the moving frame, and
    yield patches of (moving, warped-back target) with residual-momentum
    targets.  Pairs whose predicted momentum fails to shoot are skipped."""
    sp = None
    for i, (moving, target, m_true) in enumerate(pairs):
        lp = predict_full(lp_net, moving, target, spec, workers=workers)
        try:
            _, P = _shoot_maps(lp.momentum.data, kernel, shooting, need_phi=True)
        except ShootingDiverged:
            log.warning("skipping pair %d: predicted momentum diverged", i)
            continue
        if sp is None:
            sp = np.asarray(moving.geom.spacing, dtype=np.float64)
        warped_back = interp_values(target.data[..., None], P / sp)[..., 0]
        residual = VectorField(moving.geom, m_true.data - lp.momentum.data)
        batch = extract(moving, ScalarImage(moving.geom, warped_back),
                        residual, spec)
        batch = prune_background(batch, spec)
        for j in range(len(batch)):
            yield CorrectionDatasetEntry(
                moving_patch=batch.moving[j],
                warped_back_target_patch=batch.target[j],
                residual_momentum_patch=batch.momentum[j],
            )


def collate_correction_entries(entries) -> PatchBatch:
    entries = list(entries)
    if not entries:
        raise ValueError("empty correction dataset")
    d = entries[0].residual_momentum_patch.shape[0]
    locs = np.zeros((len(entries), d), dtype=np.int64)
    return PatchBatch(
        locations=locs,
        moving=np.stack([e.moving_patch for e in entries]),
        target=np.stack([e.warped_back_target_patch for e in entries]),
        momentum=np.stack([e.residual_momentum_patch for e in entries]),
    )


def predict_corrected(lp_net: RegressionNet, corr_net: RegressionNet,
                      moving: ScalarImage, target: ScalarImage,
                      spec: PatchSpec, kernel: FluidKernelOp,
                      shooting: ShootingConfig, workers: int = 1,
                      correct_iters: int = 1) -> PredictionResult:
    """Two-stage prediction: m = m_first + m_correction, summed in the moving
    frame before any use of the momentum downstream.  ``correct_iters`` > 1
    repeats the correction step on the accumulated momentum (non-default;
    kept for the deformation-statistics study)."""
    t0 = time.perf_counter()
    lp = predict_full(lp_net, moving, target, spec, workers=workers)
    m = lp.momentum.data
    n_pred, n_pruned = lp.n_patches_predicted, lp.n_patches_pruned
    sp = np.asarray(moving.geom.spacing, dtype=np.float64)
    for _ in range(correct_iters):
        _, P = _shoot_maps(m, kernel, shooting, need_phi=True)
        warped_back = ScalarImage(
            moving.geom, interp_values(target.data[..., None], P / sp)[..., 0])
        corr = predict_full(corr_net, moving, warped_back, spec, workers=workers)
        m = m + corr.momentum.data
        n_pred += corr.n_patches_predicted
        n_pruned += corr.n_patches_pruned
    return PredictionResult(
        momentum=VectorField(moving.geom, m),
        samples=None,
        uncertainty=None,
        n_patches_predicted=n_pred,
        n_patches_pruned=n_pruned,
        wall_time=time.perf_counter() - t0,
    )


def mc_predict(net: RegressionNet, moving: ScalarImage, target: ScalarImage,
               spec: PatchSpec, kernel: FluidKernelOp,
               shooting: ShootingConfig, n_samples: int = 50,
               rng: np.random.Generator | None = None,
               workers: int = 1) -> PredictionResult:
    """Monte-Carlo dropout: sample full-image momenta with dropout enabled,
    report their mean as the prediction, shoot every sample, and map the
    per-voxel deformation variance to an uncertainty image
    (sqrt of the summed per-axis variances)."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    t0 = time.perf_counter()
    rng = rng or np.random.default_rng()
    geom = moving.geom
    batch = prune_background(extract(moving, target, None, spec), spec)
    total = len(grid_locations(geom, spec))
    streams = rng.spawn(n_samples)
    samples = []
    for srng in streams:
        pred = _forward_patches(net, batch.moving, batch.target,
                                "mc_dropout", srng, workers=1)
        samples.append(assemble(pred, batch.locations, geom))
    mean_m = np.mean([s.data for s in samples], axis=0)
    maps = []
    for s in samples:
        Q, _ = _shoot_maps(s.data, kernel, shooting, need_phi=False)
        maps.append(Q)
    var = np.var(np.stack(maps, axis=0), axis=0)        # (n, *sizes, d) -> (*sizes, d)
    uncertainty = np.sqrt(var.sum(axis=-1))
    return PredictionResult(
        momentum=VectorField(geom, mean_m),
        samples=samples,
        uncertainty=ScalarImage(geom, uncertainty),
        n_patches_predicted=len(batch) * n_samples,
        n_patches_pruned=total - len(batch),
        wall_time=time.perf_counter() - t0,
    )
