"""Registration evaluation: deformation-error percentiles, Jacobian
positivity, target overlap of labels, energy comparison across methods,
log-det-J histograms, and wall-time / speedup reporting.

Percentiles use the nearest-rank definition (value at index
ceil(q/100 * n) - 1 of the sorted sample), so a sort-based oracle can
reproduce them exactly.  Deformation errors pool voxels across cases; an
optional mask restricts them to the image support, mirroring evaluation
inside a brain mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import DeformationMap, ScalarImage, jacobian_determinant, interior_slice
from .optimize import RegistrationProblem, energy_parts
from .shooting import ShootingDiverged

__all__ = [
    "DEFAULT_PERCENTILES",
    "nearest_rank_percentiles",
    "deformation_error_percentiles",
    "detj_positive_ratio",
    "target_overlap",
    "energy_report",
    "LogDetJHist",
    "logdetj_histogram",
    "histogram_difference",
    "timing_report",
    "write_report_csv",
    "write_summary",
    "write_histogram_csv",
]

DEFAULT_PERCENTILES = (0.3, 5.0, 25.0, 50.0, 75.0, 95.0, 99.7)


def nearest_rank_percentiles(values: np.ndarray, percentiles) -> dict[float, float]:
    """Nearest-rank sample percentiles of a 1-D sample."""
    flat = np.sort(np.asarray(values).ravel())
    n = flat.size
    if n == 0:
        raise ValueError("empty sample")
    out = {}
    for q in percentiles:
        if not 0 < q <= 100:
            raise ValueError(f"percentile {q} out of (0, 100]")
        rank = max(1, math.ceil(q / 100.0 * n))
        out[float(q)] = float(flat[rank - 1])
    return out


def _as_list(x):
    return x if isinstance(x, (list, tuple)) else [x]


def deformation_error_percentiles(pred_map, ref_map, mask=None,
                                  percentiles=DEFAULT_PERCENTILES):
    """Percentiles of the per-voxel 2-norm distance between mapped physical
    positions, pooled across cases.  ``mask`` may be a boolean array (or list
    of them) restricting the pooled voxels."""
    preds, refs = _as_list(pred_map), _as_list(ref_map)
    if len(preds) != len(refs):
        raise ValueError("pred/ref case counts differ")
    masks = _as_list(mask) if mask is not None else [None] * len(preds)
    pooled = []
    for p, r, mk in zip(preds, refs, masks):
        if p.geom != r.geom:
            raise ValueError("geometry mismatch between maps")
        err = np.linalg.norm(p.coords - r.coords, axis=-1)
        pooled.append(err[mk] if mk is not None else err.ravel())
    return nearest_rank_percentiles(np.concatenate(pooled), percentiles)


def detj_positive_ratio(maps) -> float:
    """Fraction of maps whose minimum interior Jacobian determinant is > 0."""
    maps = _as_list(maps)
    if not maps:
        raise ValueError("empty map list")
    good = 0
    for mp in maps:
        det = jacobian_determinant(mp).data
        if det[interior_slice(mp.geom)].min() > 0:
            good += 1
    return good / len(maps)


def target_overlap(warped_labels: ScalarImage, target_labels: ScalarImage) -> float:
    """Mean over target labels of |warped ∩ target| / |target|."""
    if warped_labels.geom != target_labels.geom:
        raise ValueError("geometry mismatch between label images")
    wl = np.rint(warped_labels.data).astype(np.int64)
    tl = np.rint(target_labels.data).astype(np.int64)
    labels = np.unique(tl)
    labels = labels[labels != 0]
    if labels.size == 0:
        raise ValueError("target has no nonzero labels")
    scores = []
    for lab in labels:
        t = tl == lab
        scores.append(np.count_nonzero(t & (wl == lab)) / np.count_nonzero(t))
    return float(np.mean(scores))


def energy_report(problems, momenta_by_method: dict) -> dict:
    """Per-method (mean, std) of the shooting energy over cases.

    ``momenta_by_method`` maps a method name to a list of VectorFields, one
    per problem.  An ``initial`` column (zero momentum) is always included.
    Diverging cases are recorded as missing (NaN) and excluded from the
    moments.
    """
    problems = list(problems)
    methods = dict(momenta_by_method)
    zeros = [None] * len(problems)
    out = {}
    per_case = {}
    for name, momenta in [("initial", zeros)] + list(methods.items()):
        if len(momenta) != len(problems):
            raise ValueError(f"method {name!r} has {len(momenta)} momenta for "
                             f"{len(problems)} problems")
        vals = []
        for prob, m in zip(problems, momenta):
            arr = (np.zeros(prob.kernel.geom.sizes + (prob.kernel.geom.dim,))
                   if m is None else m.data)
            try:
                total, _, _ = energy_parts(arr, prob)
            except ShootingDiverged:
                total = float("nan")
            vals.append(total)
        vals = np.asarray(vals)
        ok = np.isfinite(vals)
        out[name] = (float(vals[ok].mean()), float(vals[ok].std()))
        per_case[name] = vals
    out["_per_case"] = per_case
    return out


@dataclass(frozen=True)
class LogDetJHist:
    edges: np.ndarray     # bins + 1 edges of log10 det J
    counts: np.ndarray    # per-bin voxel counts
    overflow: int         # voxels with det J <= 0

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def logdetj_histogram(maps, bins: int = 40, value_range=(-1.0, 1.0)) -> LogDetJHist:
    """Pooled histogram of log10 det J over interior voxels; non-positive
    determinants go to the overflow bucket, out-of-range values clip into the
    end bins so counts + overflow always equals the pooled voxel count."""
    maps = _as_list(maps)
    vals = []
    overflow = 0
    for mp in maps:
        det = jacobian_determinant(mp).data[interior_slice(mp.geom)].ravel()
        pos = det > 0
        overflow += int(np.count_nonzero(~pos))
        vals.append(np.log10(det[pos]))
    pooled = np.concatenate(vals) if vals else np.zeros(0)
    lo, hi = value_range
    counts, edges = np.histogram(np.clip(pooled, lo, hi), bins=bins, range=(lo, hi))
    return LogDetJHist(edges=edges, counts=counts, overflow=overflow)


def histogram_difference(h1: LogDetJHist, h2: LogDetJHist) -> np.ndarray:
    """Count difference per bin (h1 - h2); histograms must share edges."""
    if not np.array_equal(h1.edges, h2.edges):
        raise ValueError("histograms have different binning")
    return h1.counts.astype(np.int64) - h2.counts.astype(np.int64)


def timing_report(timings: dict[str, float], baseline: str = "LO",
                  patches_pruned: int | None = None) -> dict:
    """Wall times plus speedup factors of every method over the baseline."""
    out = {"seconds": dict(timings)}
    base = timings.get(baseline)
    if base:
        out["speedup_over_" + baseline] = {
            k: base / v for k, v in timings.items() if k != baseline and v > 0
        }
    if patches_pruned is not None:
        out["patches_pruned"] = int(patches_pruned)
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("case", "method", "median_error", "min_detj", "target_overlap",
                  "energy", "wall_time")


def write_report_csv(rows, path) -> None:
    """Per-case rows: (case id, method, median error, min det J, TO, energy,
    wall time); empty fields for metrics that do not apply."""
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else f"{v}" for v in row) + "\n")


def write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        for key, val in summary.items():
            fh.write(f"{key} = {val}\n")


def write_histogram_csv(hist: LogDetJHist, path, counts=None) -> None:
    """Two columns: bin_center, count.  ``counts`` overrides the histogram's
    own counts (used for difference histograms)."""
    counts = hist.counts if counts is None else counts
    with open(path, "w") as fh:
        fh.write("bin_center,count\n")
        for c, n in zip(hist.centers, counts):
            fh.write(f"{c},{n}\n")
