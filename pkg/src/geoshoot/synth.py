"""Ground-truth pair generator.

Samples smooth random momenta supported on template edges (momentum is a
scalar field times the image gradient, so it lives in the family that
image-driven geodesic matching produces), shoots them, and emits
(moving, target, true momentum, true inverse map) tuples plus a manifest.
Every acceptance test and training run feeds on this, so no external data
is needed.  Generation is bitwise reproducible for a fixed seed and
independent of the worker count (per-pair seed substreams).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .fileio import read_field, write_field
from .grid import (
    DeformationMap,
    GridGeometry,
    ScalarImage,
    VectorField,
    identity_coords,
    interp_values,
    min_interior_detj,
    spatial_gradient,
)
from .kernel import FluidKernelOp, make_kernel
from .shooting import ShootingConfig, ShootingDiverged, integrate_arrays

__all__ = ["SynthConfig", "make_template", "sample_momentum", "generate_pairs",
           "load_manifest"]


@dataclass(frozen=True)
class SynthConfig:
    geom: GridGeometry
    n_pairs: int = 200
    momentum_scale: float = 2.0
    smoothness: float = 8.0        # spectral falloff length of lambda, voxels
    template: str = "shapes"       # shapes | blobs | <path to QSF image>
    seed: int = 7
    kernel_a: float = 0.01
    kernel_b: float = 0.01
    kernel_c: float = 0.001
    n_steps: int = 10
    variant_scale: float = 0.4     # per-pair warp of the template, rel. scale
    max_disp: float = 6.0          # reject samples deforming beyond this (voxels)
    remap: bool = False            # store target through a fixed monotone remap

    def __post_init__(self):
        if self.momentum_scale <= 0 or self.smoothness <= 0:
            raise ValueError("scales must be positive")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


def _smooth_noise(geom: GridGeometry, rng: np.random.Generator,
                  length: float) -> np.ndarray:
    """Periodic Gaussian random field, unit max-abs, correlation ~length voxels."""
    noise = rng.standard_normal(geom.sizes)
    ks = np.meshgrid(*[np.fft.fftfreq(n) for n in geom.sizes], indexing="ij")
    k2 = sum(k * k for k in ks)
    field = np.real(np.fft.ifftn(np.fft.fftn(noise) * np.exp(-2.0 * (np.pi * length) ** 2 * k2)))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _smoothstep(x):
    return x * x * (3.0 - 2.0 * x)


def _shapes_template(geom: GridGeometry, rng: np.random.Generator) -> np.ndarray:
    """A few superimposed smooth-edged ellipses inside an interior margin."""
    d = geom.dim
    sizes = np.array(geom.sizes, dtype=np.float64)
    margin = 0.30 * sizes
    lo, hi = margin, sizes - margin
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in geom.sizes],
                        indexing="ij")
    img = np.zeros(geom.sizes)
    n_shapes = int(rng.integers(3, 6))
    for _ in range(n_shapes):
        center = rng.uniform(lo + 0.15 * (hi - lo), hi - 0.15 * (hi - lo))
        # the smooth edge band ends at 1.25 * radius; keep it inside [lo, hi]
        cap = float(np.min(np.minimum(center - lo, hi - center))) / 1.25
        radii = np.clip(rng.uniform(0.55, 1.0, size=d) * cap, 2.0, cap)
        ang = rng.uniform(0, np.pi)
        ca, sa = np.cos(ang), np.sin(ang)
        rel = [g - c for g, c in zip(grids, center)]
        rot = list(rel)
        rot[0] = ca * rel[0] - sa * rel[1]
        rot[1] = sa * rel[0] + ca * rel[1]
        r = np.sqrt(sum((rc / rad) ** 2 for rc, rad in zip(rot, radii)))
        edge = np.clip((1.25 - r) / 0.5, 0.0, 1.0)
        intensity = rng.uniform(0.35, 1.0)
        img = np.maximum(img, intensity * _smoothstep(edge))
    return np.clip(img, 0.0, 1.0)


def _blobs_template(geom: GridGeometry, rng: np.random.Generator) -> np.ndarray:
    field = _smooth_noise(geom, rng, length=float(min(geom.sizes)) / 10.0)
    cut = np.quantile(field, 0.75)
    edge = np.clip((field - cut) / (0.35 * field.std() + 1e-12), 0.0, 1.0)
    img = _smoothstep(edge)
    # force a zero border so the momentum support stays interior
    win = np.ones(geom.sizes)
    for ax, n in enumerate(geom.sizes):
        m = max(3, int(0.15 * n))
        ramp = np.ones(n)
        ramp[:m] = _smoothstep(np.linspace(0.0, 1.0, m))
        ramp[-m:] = _smoothstep(np.linspace(1.0, 0.0, m))
        shape = [1] * geom.dim
        shape[ax] = n
        win = win * ramp.reshape(shape)
    img = img * win
    peak = img.max()
    return img / peak if peak > 0 else img


def make_template(cfg: SynthConfig) -> ScalarImage:
    """Deterministic piecewise-smooth template with >= 30% zero background."""
    if cfg.template not in ("shapes", "blobs"):
        img = read_field(cfg.template)
        if not isinstance(img, ScalarImage):
            raise ValueError("template file must hold a scalar image")
        return img
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11CE]))
    make = _shapes_template if cfg.template == "shapes" else _blobs_template
    return ScalarImage(cfg.geom, make(cfg.geom, rng))


def _kernel_for(cfg: SynthConfig) -> FluidKernelOp:
    return make_kernel(cfg.geom, cfg.kernel_a, cfg.kernel_b, cfg.kernel_c)


def _sample_momentum_for(img: ScalarImage, cfg: SynthConfig,
                         rng: np.random.Generator, kernel: FluidKernelOp,
                         scale: float, max_disp_voxels: float | None = None):
    """Rejection-sample an edge-supported momentum whose shot map stays
    diffeomorphic; returns (momentum array, final map array)."""
    grad = spatial_gradient(img).data
    support = np.linalg.norm(grad, axis=-1) >= 1e-6
    shooting = ShootingConfig(cfg.n_steps)
    X = identity_coords(img.geom)
    h = float(min(img.geom.spacing))
    max_disp = (max_disp_voxels if max_disp_voxels is not None else cfg.max_disp) * h

    def shoot_disp(m):
        _, Q, _, _ = integrate_arrays(m, kernel, shooting, need_phi=False)
        return Q, float(np.linalg.norm(Q - X, axis=-1).max())

    for halving in range(5):
        for _ in range(20):
            lam = _smooth_noise(img.geom, rng, cfg.smoothness) * scale
            m = lam[..., None] * grad
            m[~support] = 0.0
            target = rng.uniform(0.4, 0.9) * max_disp
            try:
                # pilot shot, then normalize the peak displacement so every
                # accepted sample deforms substantially but stays in range
                _, peak = shoot_disp(m)
                if peak < 1e-3 * h:
                    continue
                m *= target / peak
                Q, peak = shoot_disp(m)
            except ShootingDiverged:
                continue
            if peak > max_disp:
                continue
            if min_interior_detj(DeformationMap(img.geom, Q)) > 0:
                return m, Q
        scale *= 0.5
    raise RuntimeError("could not sample a diffeomorphic momentum "
                       "(momentum_scale too large for this template)")


def sample_momentum(cfg: SynthConfig, rng: np.random.Generator) -> VectorField:
    """Edge-supported random momentum for the configured template; accepted
    samples are guaranteed to shoot to a map with positive Jacobian."""
    template = make_template(cfg)
    m, _ = _sample_momentum_for(template, cfg, rng, _kernel_for(cfg),
                                cfg.momentum_scale)
    return VectorField(cfg.geom, m)


def _remap_intensity(data: np.ndarray) -> np.ndarray:
    """Fixed monotone intensity remap used to emulate a second modality."""
    return np.power(data, 0.6)


def _generate_one(cfg: SynthConfig, pair_seed) -> dict:
    rng = np.random.default_rng(pair_seed)
    kernel = _kernel_for(cfg)
    template = make_template(cfg)
    sp = np.asarray(cfg.geom.spacing, dtype=np.float64)

    # per-pair appearance variety: warp the template by a small random map
    _, Qv = _sample_momentum_for(template, cfg, rng, kernel, cfg.momentum_scale,
                                 max_disp_voxels=cfg.max_disp * cfg.variant_scale)
    moving = interp_values(template.data[..., None], Qv / sp)[..., 0]
    moving_img = ScalarImage(cfg.geom, moving)

    m0, Q = _sample_momentum_for(moving_img, cfg, rng, kernel,
                                 cfg.momentum_scale)
    target = interp_values(moving[..., None], Q / sp)[..., 0]
    return dict(moving=moving, target=target, momentum=m0, map=Q)


def generate_pairs(cfg: SynthConfig, out_dir, workers: int = 1) -> str:
    """Write the dataset to ``out_dir``; returns the manifest path.

    Manifest: one line per pair, `moving.qsf target.qsf momentum.qsf map.qsf`
    (paths relative to the manifest directory).
    """
    os.makedirs(out_dir, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_pairs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_generate_one, [cfg] * cfg.n_pairs, seeds))
    else:
        results = [_generate_one(cfg, s) for s in seeds]

    geom = cfg.geom
    lines = []
    for i, rec in enumerate(results):
        names = {}
        for key in ("moving", "target", "momentum", "map"):
            names[key] = f"pair_{i:04d}_{key}.qsf"
        target = rec["target"]
        if cfg.remap:
            target = _remap_intensity(target)
        write_field(ScalarImage(geom, rec["moving"]),
                    os.path.join(out_dir, names["moving"]), kind="image")
        write_field(ScalarImage(geom, target),
                    os.path.join(out_dir, names["target"]), kind="image")
        write_field(VectorField(geom, rec["momentum"]),
                    os.path.join(out_dir, names["momentum"]), kind="momentum")
        write_field(DeformationMap(geom, rec["map"]),
                    os.path.join(out_dir, names["map"]), kind="map")
        lines.append(" ".join(names[k] for k in ("moving", "target", "momentum", "map")))

    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    meta = os.path.join(out_dir, "dataset.meta")
    with open(meta, "w") as fh:
        fh.write(f"seed {cfg.seed}\nn_pairs {cfg.n_pairs}\n"
                 f"sizes {' '.join(str(n) for n in geom.sizes)}\n"
                 f"spacing {' '.join(repr(s) for s in geom.spacing)}\n"
                 f"momentum_scale {cfg.momentum_scale!r}\n"
                 f"template {cfg.template}\nremap {int(cfg.remap)}\n")
    return manifest


def load_manifest(manifest_path):
    """Yields (moving, target, momentum, map) tuples of loaded fields."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            paths = [os.path.join(base, p) for p in line.split()]
            if len(paths) != 4:
                raise ValueError(f"malformed manifest line: {line!r}")
            out.append(tuple(read_field(p) for p in paths))
    return out
