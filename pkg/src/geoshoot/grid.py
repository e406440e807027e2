"""Grid geometry, scalar/vector fields, interpolation, warping and
differential operators.

All field types are thin immutable wrappers around numpy arrays with a
canonical row-major layout (last spatial axis fastest, channels last for
vector data).  Deformation maps store *physical* coordinates, i.e. voxel
index times spacing.  All operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridGeometry",
    "ScalarImage",
    "VectorField",
    "DeformationMap",
    "identity_map",
    "interpolate_scalar",
    "warp_image",
    "compose_maps",
    "spatial_gradient",
    "jacobian_determinant",
    "histogram_equalize",
]


@dataclass(frozen=True)
class GridGeometry:
    """Regular grid: dimension, per-axis voxel counts and physical spacing."""

    dim: int
    sizes: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if len(self.sizes) != self.dim or len(self.spacing) != self.dim:
            raise ValueError("sizes/spacing length must equal dim")
        if any(n < 4 for n in self.sizes):
            raise ValueError("all grid sizes must be >= 4")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("all spacings must be > 0")

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """One float per voxel, array shape equals ``geom.sizes``."""

    geom: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.geom.sizes:
            raise ValueError(f"data shape {data.shape} != grid sizes {self.geom.sizes}")
        _check_finite(data, "ScalarImage data")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class VectorField:
    """d floats per voxel (channels-last), shape ``geom.sizes + (d,)``."""

    geom: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.geom.sizes + (self.geom.dim,):
            raise ValueError(
                f"data shape {data.shape} != {self.geom.sizes + (self.geom.dim,)}"
            )
        _check_finite(data, "VectorField data")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class DeformationMap:
    """Per-voxel mapped physical position, shape ``geom.sizes + (d,)``."""

    geom: GridGeometry
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.shape != self.geom.sizes + (self.geom.dim,):
            raise ValueError(
                f"coords shape {coords.shape} != {self.geom.sizes + (self.geom.dim,)}"
            )
        _check_finite(coords, "DeformationMap coords")
        object.__setattr__(self, "coords", coords)


def identity_coords(geom: GridGeometry) -> np.ndarray:
    """Physical coordinates of every voxel, shape ``sizes + (d,)``."""
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(geom.sizes, geom.spacing)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack(grids, axis=-1)


def identity_map(geom: GridGeometry) -> DeformationMap:
    """Map with coords(x) = x at every voxel."""
    return DeformationMap(geom, identity_coords(geom))


# ---------------------------------------------------------------------------
# multi-linear interpolation core (array level, shared by higher modules)
# ---------------------------------------------------------------------------

def _flat_strides(sizes):
    strides = np.ones(len(sizes), dtype=np.int64)
    for a in range(len(sizes) - 2, -1, -1):
        strides[a] = strides[a + 1] * sizes[a + 1]
    return strides


def _corner_setup(idx, sizes):
    """Clamp fractional index coords, split into base voxel + weights.

    Returns (base (…,d) int64, frac (…,d), inside (…,d) bool) where ``inside``
    marks axes whose raw coordinate was strictly inside the clamp range (used
    to zero position-derivatives where clamping is active).
    """
    d = idx.shape[-1]
    hi = np.asarray(sizes, dtype=np.float64) - 1.0
    inside = (idx > 0.0) & (idx < hi)
    clamped = np.clip(idx, 0.0, hi)
    base = np.floor(clamped).astype(np.int64)
    np.minimum(base, np.asarray(sizes, dtype=np.int64) - 2, out=base)
    frac = clamped - base
    return base, frac, inside


def interp_values(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Multi-linear interpolation of ``data`` (shape ``sizes + (C,)``) at
    fractional index coordinates ``idx`` (shape ``(..., d)``), clamped to the
    boundary.  Returns shape ``(..., C)``."""
    sizes = data.shape[:-1]
    d = len(sizes)
    base, frac, _ = _corner_setup(idx, sizes)
    strides = _flat_strides(sizes)
    flat = data.reshape(-1, data.shape[-1])
    base_flat = (base * strides).sum(axis=-1)
    if d == 2:
        f0 = frac[..., 0, None]
        f1 = frac[..., 1, None]
        i00 = base_flat
        v00 = flat[i00]
        v01 = flat[i00 + strides[1]]
        v10 = flat[i00 + strides[0]]
        v11 = flat[i00 + strides[0] + strides[1]]
        top = v00 + f1 * (v01 - v00)
        bot = v10 + f1 * (v11 - v10)
        return top + f0 * (bot - top)
    out = np.zeros(idx.shape[:-1] + (data.shape[-1],), dtype=data.dtype)
    for corner in range(2 ** d):
        offs = [(corner >> a) & 1 for a in range(d)]
        w = np.ones(idx.shape[:-1], dtype=data.dtype)
        fidx = base_flat
        for a in range(d):
            w = w * (frac[..., a] if offs[a] else 1.0 - frac[..., a])
            if offs[a]:
                fidx = fidx + strides[a]
        out += w[..., None] * flat[fidx]
    return out


def interp_values_and_grad(data: np.ndarray, idx: np.ndarray):
    """Like :func:`interp_values` but also returns the derivative of each
    output channel with respect to the index coordinates.

    Returns (values (…,C), grad (…,C,d)); the derivative is zeroed on axes
    where the query point is clamped to the boundary.
    """
    sizes = data.shape[:-1]
    d = len(sizes)
    base, frac, inside = _corner_setup(idx, sizes)
    strides = _flat_strides(sizes)
    flat = data.reshape(-1, data.shape[-1])
    base_flat = (base * strides).sum(axis=-1)
    C = data.shape[-1]
    if d == 2:
        f0 = frac[..., 0, None]
        f1 = frac[..., 1, None]
        i00 = base_flat
        v00 = flat[i00]
        v01 = flat[i00 + strides[1]]
        v10 = flat[i00 + strides[0]]
        v11 = flat[i00 + strides[0] + strides[1]]
        top = v00 + f1 * (v01 - v00)
        bot = v10 + f1 * (v11 - v10)
        out = top + f0 * (bot - top)
        grad = np.empty(idx.shape[:-1] + (C, 2), dtype=data.dtype)
        grad[..., 0] = (bot - top) * inside[..., None, 0]
        grad[..., 1] = ((v01 - v00) + f0 * ((v11 - v10) - (v01 - v00))) \
            * inside[..., None, 1]
        return out, grad
    out = np.zeros(idx.shape[:-1] + (C,), dtype=data.dtype)
    grad = np.zeros(idx.shape[:-1] + (C, d), dtype=data.dtype)
    for corner in range(2 ** d):
        offs = [(corner >> a) & 1 for a in range(d)]
        fidx = base_flat
        factors = []
        for a in range(d):
            factors.append(frac[..., a] if offs[a] else 1.0 - frac[..., a])
            if offs[a]:
                fidx = fidx + strides[a]
        vals = flat[fidx]
        w = np.ones(idx.shape[:-1], dtype=data.dtype)
        for f in factors:
            w = w * f
        out += w[..., None] * vals
        for a in range(d):
            dw = np.ones(idx.shape[:-1], dtype=data.dtype)
            for b in range(d):
                if b == a:
                    dw = dw * (1.0 if offs[b] else -1.0)
                else:
                    dw = dw * factors[b]
            grad[..., a] += dw[..., None] * vals
    grad *= inside[..., None, :]
    return out, grad


def splat_values(cot: np.ndarray, idx: np.ndarray, sizes) -> np.ndarray:
    """Adjoint of :func:`interp_values` with respect to the data argument.

    Scatters the cotangent ``cot`` (shape ``(..., C)``) at fractional index
    coords ``idx`` back onto a grid; returns shape ``sizes + (C,)``.
    """
    d = len(sizes)
    base, frac, _ = _corner_setup(idx, sizes)
    strides = _flat_strides(sizes)
    base_flat = (base * strides).sum(axis=-1).ravel()
    C = cot.shape[-1]
    n = int(np.prod(sizes))
    acc = np.zeros((n, C), dtype=cot.dtype)
    for corner in range(2 ** d):
        offs = [(corner >> a) & 1 for a in range(d)]
        w = np.ones(idx.shape[:-1], dtype=cot.dtype)
        fidx = base_flat.copy()
        for a in range(d):
            w = w * (frac[..., a] if offs[a] else 1.0 - frac[..., a])
            if offs[a]:
                fidx += strides[a]
        wc = (w[..., None] * cot).reshape(-1, C)
        for c in range(C):
            acc[:, c] += np.bincount(fidx, weights=wc[:, c], minlength=n)
    return acc.reshape(tuple(sizes) + (C,))


def splat_ones(idx: np.ndarray, sizes) -> np.ndarray:
    """Per-voxel total interpolation weight received from unit cotangents."""
    ones = np.ones(idx.shape[:-1] + (1,), dtype=np.float64)
    return splat_values(ones, idx, sizes)[..., 0]


def phys_to_index(coords: np.ndarray, geom: GridGeometry) -> np.ndarray:
    return coords / np.asarray(geom.spacing, dtype=np.float64)


# ---------------------------------------------------------------------------
# public field-level operations
# ---------------------------------------------------------------------------

def interpolate_scalar(img: ScalarImage, positions: DeformationMap) -> ScalarImage:
    """Sample ``img`` at the mapped positions with clamped multi-linear
    interpolation."""
    if img.geom != positions.geom:
        raise ValueError("geometry mismatch between image and positions")
    idx = phys_to_index(positions.coords, img.geom)
    vals = interp_values(img.data[..., None], idx)[..., 0]
    return ScalarImage(img.geom, vals)


def warp_image(img: ScalarImage, phi_inv: DeformationMap) -> ScalarImage:
    """Compose ``img`` with a map: returns img(phi_inv(x))."""
    return interpolate_scalar(img, phi_inv)


def warp_image_nearest(img: ScalarImage, phi_inv: DeformationMap) -> ScalarImage:
    """Nearest-neighbor warp, for label images."""
    if img.geom != phi_inv.geom:
        raise ValueError("geometry mismatch between image and positions")
    geom = img.geom
    idx = phys_to_index(phi_inv.coords, geom)
    out = img.data
    nearest = []
    for a, n in enumerate(geom.sizes):
        nearest.append(np.clip(np.rint(idx[..., a]).astype(np.int64), 0, n - 1))
    return ScalarImage(geom, out[tuple(nearest)])


def compose_maps(outer: DeformationMap, inner: DeformationMap) -> DeformationMap:
    """(outer ∘ inner)(x) = outer(inner(x)), sampled with multi-linear
    interpolation of the outer coordinate field."""
    if outer.geom != inner.geom:
        raise ValueError("geometry mismatch between maps")
    idx = phys_to_index(inner.coords, outer.geom)
    coords = interp_values(outer.coords, idx)
    return DeformationMap(outer.geom, coords)


def spatial_gradient(img: ScalarImage) -> VectorField:
    """Per-axis derivative: central differences in the interior, one-sided at
    the boundary, scaled by spacing."""
    grads = np.gradient(img.data, *img.geom.spacing, edge_order=1)
    if img.geom.dim == 1:
        grads = [grads]
    return VectorField(img.geom, np.stack(grads, axis=-1))


def jacobian_determinant(dmap: DeformationMap) -> ScalarImage:
    """Determinant of the d×d matrix of partials of the coordinate field."""
    geom = dmap.geom
    d = geom.dim
    J = np.empty(geom.sizes + (d, d), dtype=np.float64)
    for i in range(d):
        parts = np.gradient(dmap.coords[..., i], *geom.spacing, edge_order=1)
        for j in range(d):
            J[..., i, j] = parts[j]
    if d == 2:
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    else:
        det = (
            J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
            - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
            + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
        )
    return ScalarImage(geom, det)


def interior_slice(geom: GridGeometry) -> tuple:
    """Slice tuple selecting voxels at least one voxel away from every face."""
    return tuple(slice(1, n - 1) for n in geom.sizes)


def min_interior_detj(dmap: DeformationMap) -> float:
    det = jacobian_determinant(dmap).data
    return float(det[interior_slice(dmap.geom)].min())


def histogram_equalize(img: ScalarImage, bins: int) -> ScalarImage:
    """Map intensities through the empirical CDF estimated on ``bins`` bins.

    Output lies in [0, 1] and is a monotone transform of the input ranks.  A
    constant image has a degenerate CDF and maps to all zeros.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo = float(img.data.min())
    hi = float(img.data.max())
    if hi == lo:
        return ScalarImage(img.geom, np.zeros_like(img.data))
    counts, edges = np.histogram(img.data, bins=bins, range=(lo, hi))
    cdf = np.cumsum(counts) / img.data.size
    which = np.clip(np.digitize(img.data, edges[1:-1], right=False), 0, bins - 1)
    return ScalarImage(img.geom, cdf[which])
