"""The fluid differential operator L = -a lap - b grad(div) + c and its
inverse smoother K, applied spectrally under periodic boundary conditions.

The per-frequency multiplier matrices come from the DFT symbols of the
second-order finite-difference stencils (compact [1,-2,1] second
differences on the diagonal, central first differences for the mixed
grad-div couplings), so a dense matrix assembled from the same periodic
stencils reproduces the spectral application exactly.  The grad-div term
couples channels, hence d×d matrices per frequency rather than scalars.
"""

from __future__ import annotations

import numpy as np

from .grid import GridGeometry, VectorField

__all__ = ["FluidKernelOp", "make_kernel"]


class FluidKernelOp:
    """Precomputed spectral tables for L and K on one grid geometry.

    Immutable after construction; application allocates its own scratch, so
    one instance can be shared freely across threads.
    """

    def __init__(self, geom: GridGeometry, a: float, b: float, c: float):
        if c <= 0:
            raise ValueError("operator not invertible: c must be > 0")
        if a < 0 or b < 0:
            raise ValueError("a and b must be >= 0")
        self.geom = geom
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)
        d = geom.dim
        # rfft grid: full frequencies on leading axes, half on the last
        freq_shape = geom.sizes[:-1] + (geom.sizes[-1] // 2 + 1,)
        theta = []
        for ax, (n, h) in enumerate(zip(geom.sizes, geom.spacing)):
            k = np.fft.rfftfreq(n) if ax == d - 1 else np.fft.fftfreq(n)
            ang = 2.0 * np.pi * k
            shape = [1] * d
            shape[ax] = len(ang)
            theta.append(ang.reshape(shape))
        # second-difference symbol (positive): 4 sin^2(theta/2) / h^2
        w = [
            (2.0 - 2.0 * np.cos(t)) / (h * h)
            for t, h in zip(theta, geom.spacing)
        ]
        # central first-difference symbol is i*s with s = sin(theta)/h
        s = [np.sin(t) / h for t, h in zip(theta, geom.spacing)]
        lap = sum(np.broadcast_to(wi, freq_shape).copy() for wi in w)
        L = np.zeros((d, d) + freq_shape, dtype=np.float64)
        for i in range(d):
            L[i, i] = self.a * lap + self.c + self.b * np.broadcast_to(w[i], freq_shape)
            for j in range(d):
                if i != j:
                    L[i, j] = self.b * np.broadcast_to(s[i] * s[j], freq_shape)
        # invert the d×d matrix at every frequency
        Lm = np.moveaxis(L, (0, 1), (-2, -1))
        Km = np.linalg.inv(Lm)
        self._l_table = L
        self._k_table = np.moveaxis(Km, (-2, -1), (0, 1))

    # -- application ---------------------------------------------------

    def _apply_table(self, table: np.ndarray, data: np.ndarray) -> np.ndarray:
        geom = self.geom
        d = geom.dim
        axes = tuple(range(d))
        fhat = [np.fft.rfftn(data[..., i], axes=axes) for i in range(d)]
        out = np.empty(geom.sizes + (d,), dtype=np.float64)
        for i in range(d):
            acc = table[i, 0] * fhat[0]
            for j in range(1, d):
                acc += table[i, j] * fhat[j]
            out[..., i] = np.fft.irfftn(acc, s=geom.sizes, axes=axes)
        return out

    def apply_L_array(self, v: np.ndarray) -> np.ndarray:
        return self._apply_table(self._l_table, v)

    def apply_K_array(self, m: np.ndarray) -> np.ndarray:
        return self._apply_table(self._k_table, m)

    def apply_L(self, v: VectorField) -> VectorField:
        """m = L v."""
        self._check(v)
        return VectorField(self.geom, self.apply_L_array(v.data))

    def apply_K(self, m: VectorField) -> VectorField:
        """v = K m."""
        self._check(m)
        return VectorField(self.geom, self.apply_K_array(m.data))

    def pairing(self, m1: VectorField, m2: VectorField) -> float:
        """<m1, K m2> summed over the grid, times voxel volume."""
        self._check(m1)
        self._check(m2)
        return self.pairing_array(m1.data, m2.data)

    def pairing_array(self, m1: np.ndarray, m2: np.ndarray) -> float:
        return float(np.sum(m1 * self.apply_K_array(m2)) * self.geom.voxel_volume)

    def _check(self, f):
        if f.geom != self.geom:
            raise ValueError("geometry mismatch between kernel and field")


def make_kernel(geom: GridGeometry, a: float, b: float, c: float) -> FluidKernelOp:
    """Build the spectral tables for L and K; raises if c <= 0."""
    return FluidKernelOp(geom, a, b, c)
