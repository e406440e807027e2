"""Patch extraction on a shared lattice, background pruning, and
sliding-window reassembly with overlap averaging.

Patches are stacked channels-first (count, channels, *patch) so they feed
the regression network directly; vector patches carry d channels taken from
the channels-last grid layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .grid import GridGeometry, ScalarImage, VectorField

__all__ = [
    "PatchSpec",
    "PatchBatch",
    "grid_locations",
    "extract",
    "prune_background",
    "assemble",
]


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 15
    stride: int = 14
    prune_threshold: float = 0.01

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.stride > self.patch_size:
            raise ValueError("stride must not exceed patch_size (coverage)")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be >= 0")


@dataclass(frozen=True, eq=False)
class PatchBatch:
    locations: np.ndarray          # (n, d) start indices
    moving: np.ndarray             # (n, 1, *patch)
    target: np.ndarray             # (n, 1, *patch)
    momentum: np.ndarray | None    # (n, d, *patch) or None

    def __post_init__(self):
        n = self.locations.shape[0]
        if self.moving.shape[0] != n or self.target.shape[0] != n:
            raise ValueError("patch stacks must have equal counts")
        if self.momentum is not None and self.momentum.shape[0] != n:
            raise ValueError("patch stacks must have equal counts")

    def __len__(self):
        return self.locations.shape[0]


def axis_starts(size: int, patch: int, stride: int) -> list[int]:
    """Lattice starts 0, s, 2s, ... plus one boundary-aligned start at
    size - patch when the lattice does not already reach it."""
    if patch > size:
        raise ValueError(f"patch size {patch} exceeds grid size {size}")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def grid_locations(geom: GridGeometry, spec: PatchSpec) -> np.ndarray:
    """All patch start corners, shape (n, d); their union covers the grid."""
    per_axis = [axis_starts(n, spec.patch_size, spec.stride) for n in geom.sizes]
    return np.array(list(itertools.product(*per_axis)), dtype=np.int64)


def _slices(loc, p):
    return tuple(slice(int(s), int(s) + p) for s in loc)


def extract(moving: ScalarImage, target: ScalarImage,
            momentum: VectorField | None, spec: PatchSpec) -> PatchBatch:
    """Copy patches of moving/target (and momentum, when given) at every
    lattice location."""
    if moving.geom != target.geom:
        raise ValueError("geometry mismatch between moving and target")
    if momentum is not None and momentum.geom != moving.geom:
        raise ValueError("geometry mismatch between images and momentum")
    geom = moving.geom
    locs = grid_locations(geom, spec)
    p = spec.patch_size
    d = geom.dim
    pshape = (p,) * d
    n = locs.shape[0]
    mv = np.empty((n, 1) + pshape)
    tg = np.empty((n, 1) + pshape)
    mom = np.empty((n, d) + pshape) if momentum is not None else None
    for i, loc in enumerate(locs):
        sl = _slices(loc, p)
        mv[i, 0] = moving.data[sl]
        tg[i, 0] = target.data[sl]
        if momentum is not None:
            mom[i] = np.moveaxis(momentum.data[sl], -1, 0)
    return PatchBatch(locs, mv, tg, mom)


def prune_background(batch: PatchBatch, spec: PatchSpec) -> PatchBatch:
    """Drop patches whose moving AND target blocks lie entirely below the
    background threshold; order of the kept patches is preserved."""
    tau = spec.prune_threshold
    axes = tuple(range(1, batch.moving.ndim))
    bg = (batch.moving < tau).all(axis=axes) & (batch.target < tau).all(axis=axes)
    keep = ~bg
    return PatchBatch(
        batch.locations[keep],
        batch.moving[keep],
        batch.target[keep],
        None if batch.momentum is None else batch.momentum[keep],
    )


def assemble(momentum_patches: np.ndarray, locations: np.ndarray,
             geom: GridGeometry) -> VectorField:
    """Overlap-average patch momenta back onto the grid; voxels touched by no
    patch (pruned everywhere) stay exactly zero."""
    d = geom.dim
    if momentum_patches.ndim != d + 2 or momentum_patches.shape[1] != d:
        raise ValueError("momentum patches must be (n, d, *patch)")
    p = momentum_patches.shape[2]
    acc = np.zeros(geom.sizes + (d,), dtype=np.float64)
    count = np.zeros(geom.sizes, dtype=np.int64)
    for i, loc in enumerate(locations):
        sl = _slices(loc, p)
        acc[sl] += np.moveaxis(momentum_patches[i], 0, -1)
        count[sl] += 1
    nz = count > 0
    acc[nz] /= count[nz][..., None]
    return VectorField(geom, acc)
