"""Numerical optimization of the shooting energy over the initial momentum.

Energy:  E(m0) = <m0, K m0> + (1/sigma^2) ||M o Phi^{-1}(1) - T||^2

The gradient is the exact derivative of the discretized forward pipeline
(reverse-mode through the RK4 momentum steps, the semi-Lagrangian inverse-map
updates and the warp/SSD head), so it is directly verifiable against finite
differences.  Descent is plain gradient descent with Armijo backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    GridGeometry,
    ScalarImage,
    VectorField,
    identity_coords,
    interp_values,
    interp_values_and_grad,
    splat_values,
)
from .kernel import FluidKernelOp
from .shooting import ShootingConfig, ShootingDiverged, _cdiff, rk4_step

__all__ = [
    "RegistrationProblem",
    "OptimizeConfig",
    "OptimizeResult",
    "energy",
    "energy_gradient",
    "optimize",
]


@dataclass(frozen=True, eq=False)
class RegistrationProblem:
    moving: ScalarImage
    target: ScalarImage
    kernel: FluidKernelOp
    sigma: float = 0.2
    shooting: ShootingConfig = field(default_factory=ShootingConfig)

    def __post_init__(self):
        if self.moving.geom != self.target.geom or self.moving.geom != self.kernel.geom:
            raise ValueError("moving/target/kernel geometries must match")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")


@dataclass(frozen=True)
class OptimizeConfig:
    max_iters: int = 200
    grad_tol: float = 1e-6
    ls_shrink: float = 0.5
    ls_c1: float = 1e-4
    step0: float = 1.0
    max_ls_shrinks: int = 30

    def __post_init__(self):
        if not (0 < self.ls_shrink < 1) or not (0 < self.ls_c1 < 1):
            raise ValueError("ls_shrink and ls_c1 must lie in (0, 1)")
        if self.max_iters < 1 or self.grad_tol <= 0 or self.step0 <= 0:
            raise ValueError("max_iters, grad_tol and step0 must be positive")


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    m0: VectorField
    energy_trace: list[tuple[int, float, float, float]]
    converged: bool
    iters_used: int


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def _forward_Q(m0, prob: RegistrationProblem, record=False):
    """Integrate momentum + inverse map only; returns (Q_final, caches).

    With ``record`` the per-step rk4 stage caches are kept for the reverse
    sweep (every state is checkpointed; fine at desk scale).
    """
    geom = prob.kernel.geom
    X = identity_coords(geom)
    dt = 1.0 / prob.shooting.n_steps
    m = np.array(m0, dtype=np.float64)
    Q = X.copy()
    caches = [] if record else None
    v = prob.kernel.apply_K_array(m)
    from .shooting import euler_step

    for _ in range(prob.shooting.n_steps):
        if prob.shooting.integrator == "rk4":
            m, Q, v, cache = rk4_step(m, Q, prob.kernel, dt, X, v_start=v,
                                      with_cache=record)
        else:
            m_prev, Q_prev = m, Q
            m, Q, v, _ = euler_step(m, Q, prob.kernel, dt, X, v_start=v)
            cache = {"m": m_prev, "Q": Q_prev}
        if record:
            caches.append(cache)
    return Q, caches


def _match_term(Q, prob: RegistrationProblem, match_weight):
    geom = prob.kernel.geom
    sp = np.asarray(geom.spacing, dtype=np.float64)
    warped = interp_values(prob.moving.data[..., None], Q / sp)[..., 0]
    resid = warped - prob.target.data
    return (
        match_weight / prob.sigma**2 * float(np.sum(resid * resid)) * geom.voxel_volume
    )


def energy_parts(m0_arr, prob: RegistrationProblem, match_weight=1.0):
    reg = prob.kernel.pairing_array(m0_arr, m0_arr)
    Q, _ = _forward_Q(m0_arr, prob)
    match = _match_term(Q, prob, match_weight)
    return reg + match, reg, match


def energy(m0: VectorField, prob: RegistrationProblem):
    """Returns (total, reg, match)."""
    if m0.geom != prob.kernel.geom:
        raise ValueError("geometry mismatch between momentum and problem")
    return energy_parts(m0.data, prob)


# ---------------------------------------------------------------------------
# discrete adjoint
# ---------------------------------------------------------------------------

def _vjp_ad_star(v, m, u, spacing):
    """Adjoints of A(v, m) = ad*_v m against cotangent u.

    Returns (dv, dm) with dm = ad_v u (the coadjoint duality) and
    dv_j = -sum_i d_i(u_i m_j) - sum_i m_i d_j u_i.
    """
    d = m.shape[-1]
    dm = np.zeros_like(m)
    dv = np.zeros_like(v)
    Du = [[_cdiff(u[..., i], j, spacing[j]) for j in range(d)] for i in range(d)]
    for i in range(d):
        acc = np.zeros(m.shape[:-1], dtype=m.dtype)
        for j in range(d):
            acc += _cdiff(v[..., i], j, spacing[j]) * u[..., j]
            acc -= Du[i][j] * v[..., j]
        dm[..., i] = acc
    for j in range(d):
        acc = np.zeros(m.shape[:-1], dtype=m.dtype)
        for i in range(d):
            acc -= _cdiff(u[..., i] * m[..., j], i, spacing[i])
            acc -= m[..., i] * Du[i][j]
        dv[..., j] = acc
    return dv, dm


def _sample_adjoint(vfield, pos, cot, spacing, sizes):
    """Adjoints of val = Lerp(vfield, pos): returns (dfield, dpos)."""
    sp = np.asarray(spacing, dtype=np.float64)
    idx = pos / sp
    _, G = interp_values_and_grad(vfield, idx)
    dpos = np.einsum("...cj,...c->...j", G, cot) / sp
    dfield = splat_values(cot, idx, sizes)
    return dfield, dpos


def _step_backward(cache, dm_next, dQ_next, kern: FluidKernelOp, dt, X):
    """Reverse one rk4_step given cotangents on (m_{n+1}, Q_{n+1})."""
    geom = kern.geom
    sp = geom.spacing
    spv = np.asarray(sp, dtype=np.float64)
    sizes = geom.sizes
    m, Q = cache["m"], cache["Q"]
    v1, a2, v2, a3, v3, a4, v4 = (
        cache["v1"], cache["a2"], cache["v2"], cache["a3"], cache["v3"],
        cache["a4"], cache["v4"],
    )
    p2, p3, p4 = cache["p2"], cache["p3"], cache["p4"]
    v5, xd = cache["v5"], cache["xd"]

    # --- inverse-map update: Q' = Lerp(Q, xd)
    idx_xd = xd / spv
    _, Gq = interp_values_and_grad(Q, idx_xd)
    dQ = splat_values(dQ_next, idx_xd, sizes)
    dxd = np.einsum("...cj,...c->...j", Gq, dQ_next) / spv

    # --- departure-point RK4 (reverse order through l4 .. l1)
    dl4 = (dt / 6.0) * dxd
    df, dp4 = _sample_adjoint(v1, p4, -dl4, sp, sizes)
    dv1 = df
    dl3 = (dt / 3.0) * dxd + dt * dp4
    df, dp3 = _sample_adjoint(v2, p3, -dl3, sp, sizes)
    dv2 = df
    dl2 = (dt / 3.0) * dxd + (dt / 2.0) * dp3
    df, dp2 = _sample_adjoint(v3, p2, -dl2, sp, sizes)
    dv3 = df
    dl1 = (dt / 6.0) * dxd + (dt / 2.0) * dp2
    df, _ = _sample_adjoint(v5, X, -dl1, sp, sizes)
    dv5 = df

    # --- v5 = K m'
    dm_total = dm_next + kern.apply_K_array(dv5)

    # --- RK4 stages (k_i = -A(v_i, a_i))
    dk4 = (dt / 6.0) * dm_total
    dv, da = _vjp_ad_star(v4, a4, -dk4, sp)
    da4 = da + kern.apply_K_array(dv)

    dk3 = (dt / 3.0) * dm_total + dt * da4
    dv, da = _vjp_ad_star(v3, a3, -dk3, sp)
    da3 = da + kern.apply_K_array(dv + dv3)

    dk2 = (dt / 3.0) * dm_total + (dt / 2.0) * da3
    dv, da = _vjp_ad_star(v2, a2, -dk2, sp)
    da2 = da + kern.apply_K_array(dv + dv2)

    dk1 = (dt / 6.0) * dm_total + (dt / 2.0) * da2
    dv, da = _vjp_ad_star(v1, m, -dk1, sp)
    dm = dm_total + da2 + da3 + da4 + da + kern.apply_K_array(dv + dv1)

    return dm, dQ


def energy_gradient_arrays(m0_arr, prob: RegistrationProblem, match_weight=1.0):
    """Returns (grad, total, reg, match)."""
    kern = prob.kernel
    geom = kern.geom
    sp = np.asarray(geom.spacing, dtype=np.float64)
    X = identity_coords(geom)
    dt = 1.0 / prob.shooting.n_steps

    Q_final, caches = _forward_Q(m0_arr, prob, record=True)
    reg = kern.pairing_array(m0_arr, m0_arr)

    # head: match term and its cotangent on Q(1)
    warped, Gm = interp_values_and_grad(prob.moving.data[..., None], Q_final / sp)
    resid = warped[..., 0] - prob.target.data
    match = match_weight / prob.sigma**2 * float(np.sum(resid**2)) * geom.voxel_volume
    scale = 2.0 * match_weight / prob.sigma**2 * geom.voxel_volume
    dQ = scale * resid[..., None] * Gm[..., 0, :] / sp

    dm = np.zeros_like(m0_arr)
    for n in range(prob.shooting.n_steps - 1, -1, -1):
        cache = caches[n]
        if prob.shooting.integrator == "rk4":
            dm, dQ = _step_backward(cache, dm, dQ, kern, dt, X)
        else:
            dm, dQ = _euler_backward(cache["m"], cache["Q"], dm, dQ, kern, dt, X)
    grad = dm + 2.0 * geom.voxel_volume * kern.apply_K_array(m0_arr)
    return grad, reg + match, reg, match


def _euler_backward(m, Q, dm_next, dQ_next, kern, dt, X):
    geom = kern.geom
    sp = geom.spacing
    spv = np.asarray(sp, dtype=np.float64)
    v1 = kern.apply_K_array(m)
    xd = X - dt * v1
    idx_xd = xd / spv
    _, Gq = interp_values_and_grad(Q, idx_xd)
    dQ = splat_values(dQ_next, idx_xd, geom.sizes)
    dxd = np.einsum("...cj,...c->...j", Gq, dQ_next) / spv
    dv1 = -dt * dxd
    dv, da = _vjp_ad_star(v1, m, -dt * dm_next, sp)
    dm = dm_next + da + kern.apply_K_array(dv + dv1)
    return dm, dQ


def energy_gradient(m0: VectorField, prob: RegistrationProblem) -> VectorField:
    """Exact gradient of the total energy with respect to m0."""
    if m0.geom != prob.kernel.geom:
        raise ValueError("geometry mismatch between momentum and problem")
    grad, _, _, _ = energy_gradient_arrays(m0.data, prob)
    return VectorField(m0.geom, grad)


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------

def optimize(prob: RegistrationProblem, cfg: OptimizeConfig | None = None
             ) -> OptimizeResult:
    """Gradient descent with Armijo backtracking from m0 = 0."""
    cfg = cfg or OptimizeConfig()
    geom = prob.kernel.geom
    m = np.zeros(geom.sizes + (geom.dim,), dtype=np.float64)

    grad, total, reg, match = energy_gradient_arrays(m, prob)
    trace = [(0, total, reg, match)]
    converged = False
    step = None
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gmax = float(np.abs(grad).max())
        if gmax < cfg.grad_tol:
            converged = True
            break
        if step is None:
            step = cfg.step0 / gmax
        else:
            step = step / cfg.ls_shrink  # one notch of growth between iterations
        gsq = float(np.sum(grad * grad))
        accepted = False
        for _ in range(cfg.max_ls_shrinks):
            trial = m - step * grad
            try:
                e_new, _, _ = energy_parts(trial, prob)
            except ShootingDiverged:
                e_new = np.inf
            if e_new <= total - cfg.ls_c1 * step * gsq:
                accepted = True
                break
            step *= cfg.ls_shrink
        if not accepted:
            break
        m = m - step * grad
        grad, total, reg, match = energy_gradient_arrays(m, prob)
        trace.append((it, total, reg, match))
    else:
        it = cfg.max_iters

    return OptimizeResult(
        m0=VectorField(geom, m),
        energy_trace=trace,
        converged=converged,
        iters_used=it,
    )
