"""Trajectory energy, its exact gradient, and the zero-energy certificate.

The energy of a trajectory ``u_0, ..., u_M`` with step ``tau`` is the sum of
per-interval convex gaps

    J(u) = sum_k tau * [ Psi(lam * m_k) + Psi*(H_k) - lam * <m_k, H_k> ],

where ``m_k`` is the interval midpoint average, ``H_k`` is the dual residual

    H_k = -(u_{k+1} - u_k)/tau - Lambda_{t_{k+1/2}}(m_k),

``Psi`` is the integrated dissipation density over the spatial grid, and
``Psi*`` its convex conjugate on nodal dual densities.  Each interval term is
a Fenchel-Young gap, hence nonnegative, and vanishes exactly when the
midpoint scheme for the evolution is satisfied on that interval.  Zero energy
is therefore a certificate that the trajectory solves the discrete equation;
the ``normalized`` field of the report measures closeness to that certificate
on the natural scale of the terms themselves.

``Psi*`` is evaluated by solving the stationarity equation ``DPsi(z) = y``
globally on the grid: a single symmetric positive-definite solve for
quadratic densities, a damped Newton iteration with a weighted-Laplacian
Jacobian otherwise.  The maximizer ``z = DPsi*(y)`` is reused for the primal
defect ``W_k = lam * m_k - DPsi*(H_k)`` and for the gradient assembly, so one
energy evaluation prices all certificate quantities at once.

Quadratic densities evaluate all time slices in one batched linear solve;
non-quadratic ones solve slices independently (optionally in parallel, see
:mod:`benpde.runtime`), with reductions in fixed slice order either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .convex import PowerDensity
from .errors import ConjugateSolveError
from .grid import (
    Field,
    SpaceGrid,
    Trajectory,
    dual_grad_norm,
    grad_norm,
    h_inner_batch,
    h_norm,
    poisson_solve,
    weighted_neg_laplacian,
)
from .models import (
    ModelSpec,
    dlambda_adjoint_density,
    lambda_density,
    psi_gradient_density,
    psi_hessian_edge_weights,
    psi_total,
)
from .runtime import map_indexed

__all__ = [
    "EnergyReport",
    "CertificateVerdict",
    "conjugate_on_dual",
    "residual",
    "eval_energy",
    "energy_and_gradient",
    "grad_energy",
    "trajectory_grad_norm",
    "certificate",
]

#: Additive floor in the ``normalized`` denominator (degenerate-input safety).
NORMALIZATION_FLOOR = 1e-30

#: Relative residual tolerance of the dual Newton solves.
CONJUGATE_TOL = 1e-12

#: Iteration cap of the dual Newton solves.
CONJUGATE_MAX_ITERS = 60


@dataclass(frozen=True)
class EnergyReport:
    """Certificate quantities of one trajectory under one model.

    ``total`` is the trajectory energy; ``term_psi``, ``term_conj`` and
    ``term_pair`` are its three summed constituents (primal density, dual
    conjugate, duality pairing).  ``residual_norm`` and ``defect_norm`` are
    the mixed-norm sizes of the dual residual and the primal defect, and
    ``normalized`` is ``total`` divided by the summed term magnitudes.
    """

    total: float
    term_psi: float
    term_conj: float
    term_pair: float
    residual_norm: float
    defect_norm: float
    normalized: float

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "term_psi": self.term_psi,
            "term_conj": self.term_conj,
            "term_pair": self.term_pair,
            "residual_norm": self.residual_norm,
            "defect_norm": self.defect_norm,
            "normalized": self.normalized,
        }


@dataclass(frozen=True)
class CertificateVerdict:
    """Outcome of the zero-energy test at a given tolerance.

    ``solved`` requires both the normalized energy and the primal defect to
    be small; ``scale`` is the trajectory-size reference the defect is
    measured against (mixed norms of the primal arguments, floored at one).
    """

    solved: bool
    normalized: float
    defect_norm: float
    scale: float
    tol: float

    def to_json_dict(self) -> dict:
        return {
            "solved": self.solved,
            "normalized": self.normalized,
            "defect_norm": self.defect_norm,
            "scale": self.scale,
            "tol": self.tol,
        }


# -- conjugate of the integrated density ------------------------------------------


def _conjugate_newton_single(density: PowerDensity, grid: SpaceGrid,
                             y: np.ndarray, tol: float, max_iters: int):
    """Damped Newton for ``DPsi(z) = y`` on one slice (scalar fields)."""
    z = np.zeros_like(y)
    g = -y.astype(float)
    res = h_norm(grid, g)
    target = tol * max(1.0, h_norm(grid, y))
    for it in range(max_iters):
        if res <= target:
            return z, it
        weights = psi_hessian_edge_weights(density, grid, z)
        jac = spla.splu(weighted_neg_laplacian(grid, weights).tocsc())
        step = jac.solve(-g.ravel()).reshape(z.shape)
        s = 1.0
        for _ in range(30):
            z_new = z + s * step
            g_new = psi_gradient_density(density, grid, z_new) - y
            res_new = h_norm(grid, g_new)
            if res_new <= (1.0 - 1e-4 * s) * res:
                break
            s *= 0.5
        else:
            raise ConjugateSolveError(
                f"dual Newton stalled at residual {res:.3e}", res, it)
        z, g, res = z_new, g_new, res_new
    if res <= target:
        return z, max_iters
    raise ConjugateSolveError(
        f"dual Newton hit the iteration cap at residual {res:.3e}",
        res, max_iters)


def conjugate_on_dual(density: PowerDensity, grid: SpaceGrid, y, *,
                      tol: float = CONJUGATE_TOL,
                      max_iters: int = CONJUGATE_MAX_ITERS):
    """Conjugate of the integrated density at nodal dual densities ``y``.

    Returns ``(values, argmax, iterations)`` where ``argmax`` solves
    ``DPsi(argmax) = y`` and ``values = <argmax, y> - Psi(argmax)``.  ``y``
    may carry leading batch axes; quadratic densities are solved for all
    batch entries in one factorized solve, other exponents one slice at a
    time (parallel under ``BEN_THREADS``), raising
    :class:`~benpde.errors.ConjugateSolveError` tagged with the slice index
    on failure.
    """
    arr = np.asarray(y, dtype=float)
    single = arr.ndim == grid.dim + 1
    if single:
        arr = arr[None, ...]
    lead = arr.shape[: -(grid.dim + 1)]
    a, q, eps = density.coefficient, density.exponent, density.regularizer

    if q == 2.0:
        # DPsi(z) = -(a+eps) * laplacian(z), so one Dirichlet solve inverts it
        z = poisson_solve(grid, -arr) / (a + eps)
        iters = 0
    else:
        if arr.shape[-(grid.dim + 1)] != 1:
            raise ValueError(
                "non-quadratic conjugate solves support one-component fields")
        flat = arr.reshape((-1,) + arr.shape[-(grid.dim + 1):])

        def one(i: int):
            try:
                return _conjugate_newton_single(density, grid, flat[i], tol,
                                                max_iters)
            except ConjugateSolveError as exc:
                raise ConjugateSolveError(
                    f"slice {i}: {exc}", exc.residual, exc.iterations) from exc

        solved = map_indexed(one, flat.shape[0])
        z = np.stack([zi for zi, _ in solved]).reshape(arr.shape)
        iters = max(it for _, it in solved) if solved else 0

    values = (h_inner_batch(grid, z, arr)
              - np.atleast_1d(psi_total(density, grid, z)).reshape(lead))
    if single:
        return float(values[0]), z[0], iters
    return values, z, iters


# -- residual and energy ------------------------------------------------------------


def _midpoint_frames(traj: Trajectory):
    u = traj.states
    mids = 0.5 * (u[:-1] + u[1:])
    dudt = (u[1:] - u[:-1]) / traj.tau
    t_mid = 0.5 * (traj.times[:-1] + traj.times[1:])
    return mids, dudt, t_mid


def residual_all(model: ModelSpec, traj: Trajectory) -> np.ndarray:
    """Dual residuals of every interval, shape ``(M, k, *grid.shape)``."""
    mids, dudt, t_mid = _midpoint_frames(traj)
    return -dudt - lambda_density(model, traj.grid, mids, t_mid)


def residual(model: ModelSpec, traj: Trajectory, k: int) -> Field:
    """Dual residual ``H_k`` of interval ``k`` as a nodal density field."""
    if not 0 <= k < traj.n_steps:
        raise IndexError(f"interval index {k} out of range")
    mids, dudt, t_mid = _midpoint_frames(traj)
    h = -dudt[k] - lambda_density(model, traj.grid, mids[k], float(t_mid[k]))[0]
    return Field(traj.grid, h)


def _lq_time_norm(tau: float, slice_norms: np.ndarray, q: float) -> float:
    return float((tau * np.sum(np.asarray(slice_norms) ** q)) ** (1.0 / q))


def _assemble(model: ModelSpec, traj: Trajectory):
    """All certificate ingredients of a trajectory in one batched sweep."""
    grid = traj.grid
    d = model.density
    lam = float(model.lam)
    tau = traj.tau
    mids, dudt, t_mid = _midpoint_frames(traj)
    H = -dudt - lambda_density(model, grid, mids, t_mid)

    if model.lam:
        psi_slices = np.atleast_1d(psi_total(d, grid, lam * mids))
    else:
        psi_slices = np.zeros(traj.n_steps)
    conj_slices, z, _ = conjugate_on_dual(d, grid, H)
    conj_slices = np.atleast_1d(conj_slices)
    pair_slices = -lam * h_inner_batch(grid, mids, H)

    defect = lam * mids - z
    q = d.exponent
    qstar = q / (q - 1.0)

    term_psi = tau * float(np.sum(psi_slices))
    term_conj = tau * float(np.sum(conj_slices))
    term_pair = tau * float(np.sum(pair_slices))
    total = term_psi + term_conj + term_pair
    report = EnergyReport(
        total=total,
        term_psi=term_psi,
        term_conj=term_conj,
        term_pair=term_pair,
        residual_norm=_lq_time_norm(
            tau, np.atleast_1d(dual_grad_norm(grid, H, qstar)), qstar),
        defect_norm=_lq_time_norm(
            tau, np.atleast_1d(grad_norm(grid, defect, q)), q),
        normalized=total / (term_psi + term_conj + abs(term_pair)
                            + NORMALIZATION_FLOOR),
    )
    return report, mids, t_mid, H, z, defect


def eval_energy(model: ModelSpec, traj: Trajectory) -> EnergyReport:
    """Certificate energy and norms of a trajectory under a model."""
    report, *_ = _assemble(model, traj)
    return report


def energy_and_gradient(model: ModelSpec, traj: Trajectory):
    """Energy report plus the nodal gradient array ``(M+1, k, *grid.shape)``.

    The gradient is the Riesz representer of the exact directional
    derivative in the time-weighted spatial inner product: for any nodal
    perturbation ``s`` with ``s_0 = 0``,

        dJ(u)[s] = sum_j tau * <s_j, g_j>_H.

    Row 0 is identically zero (the initial state is locked).
    """
    report, mids, t_mid, H, z, defect = _assemble(model, traj)
    grid = traj.grid
    d = model.density
    lam = float(model.lam)
    tau = traj.tau

    B = defect
    C = dlambda_adjoint_density(model, grid, mids, t_mid, B)
    if model.lam:
        C = C + lam * (psi_gradient_density(d, grid, lam * mids) - H)

    g = np.zeros_like(traj.states)
    if traj.n_steps > 1:
        g[1:-1] = 0.5 * (C[:-1] + C[1:]) + (B[:-1] - B[1:]) / tau
    g[-1] = 0.5 * C[-1] + B[-1] / tau
    return report, g


def grad_energy(model: ModelSpec, traj: Trajectory) -> list:
    """Exact energy gradient as one field per time node (zero at node 0)."""
    _, g = energy_and_gradient(model, traj)
    return [Field(traj.grid, g[j]) for j in range(g.shape[0])]


def trajectory_grad_norm(grid: SpaceGrid, tau: float, g: np.ndarray) -> float:
    """Riesz norm ``sqrt(sum_j tau * |g_j|_H^2)`` of a nodal gradient array."""
    return float(np.sqrt(max(tau * float(np.sum(h_inner_batch(grid, g, g))),
                             0.0)))


def certificate(model: ModelSpec, traj: Trajectory,
                tol: float) -> CertificateVerdict:
    """Zero-energy test: solved iff the normalized energy and the primal
    defect both fall below ``tol`` (the defect on the trajectory's own
    scale).

    The scale is the mixed norm of the primal quantities entering the
    defect — ``|lam * u|`` and ``|DPsi*(H)|`` in the time-Lq spatial
    seminorm — plus one, so the test is meaningful for tiny and for large
    trajectories alike.
    """
    report, mids, _, _, z, _ = _assemble(model, traj)
    grid = traj.grid
    q = model.density.exponent
    tau = traj.tau
    lam = float(model.lam)
    scale = (_lq_time_norm(tau, np.atleast_1d(grad_norm(grid, lam * mids, q)), q)
             + _lq_time_norm(tau, np.atleast_1d(grad_norm(grid, z, q)), q)
             + 1.0)
    solved = (report.normalized <= tol) and (report.defect_norm <= tol * scale)
    return CertificateVerdict(solved=bool(solved),
                              normalized=report.normalized,
                              defect_norm=report.defect_norm,
                              scale=scale, tol=tol)
