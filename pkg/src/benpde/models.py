"""Evolution models in divergence form and their structural condition checks.

A model couples a convex dissipation density ``psi`` with a (possibly zero)
first-order operator assembled weakly from three ingredients, all optional:

* a reaction ``theta(B, x, t)`` tested directly against perturbations,
* a matrix flux ``xi(B, x, t)`` tested against perturbation gradients,
* a scalar flux ``F(u)`` (Burgers-type, truncated to stay Lipschitz).

The weak form on the Dirichlet grid reads, for any test field ``delta``,

    <delta, Lambda_t(u)> = sum_edges h^d [xi + F] . grad(delta)
                         - sum_nodes h^d theta . delta,

so ``Lambda_t(u)`` is carried as the nodal density
``-div(edge_avg(xi + F)) - theta``.  Flux terms are sampled at the nodes
(including the zero boundary layer) and averaged onto the staggered edges;
the divergence is the exact adjoint of the staggered gradient, so
summation-by-parts identities hold to roundoff.

Every model stores fitted constants for the structural inequalities the
well-posedness theory needs (coercive growth, derivative growth, one-sided
monotonicity, energy positivity, uniform convexity, Lipschitz bounds).  The
constants are derived from the declared Lipschitz data of the terms plus a
declared one-sided reaction bound ``B * theta(B) <= rho (B^2 + 1)``; a model
whose reaction pumps energy faster than its declaration is caught by the
positivity check (see :func:`adversarial_model`).

All operator entry points accept leading batch axes so that whole
trajectories (or checker sample batches) evaluate in single vectorised
sweeps.  Models with reaction/flux terms are scalar (one component); pure
dissipation models work for any component count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .convex import PowerDensity, radial_value
from .errors import ModelEvaluationError, NonFiniteInputError
from .grid import (
    Field,
    SpaceGrid,
    divergence,
    dual_grad_norm,
    grad_magnitudes,
    grad_norm,
    gradient,
    h_inner,
    poisson_solve,
)
from .runtime import map_indexed

__all__ = [
    "ReactionTerm",
    "FluxTerm",
    "ScalarFluxTerm",
    "ConditionConstants",
    "ModelSpec",
    "ConditionReport",
    "apply_lambda",
    "lambda_density",
    "dlambda_density",
    "dlambda_matrix",
    "dlambda_adjoint_density",
    "psi_total",
    "psi_grad_edges",
    "psi_gradient_density",
    "psi_hessian_edge_weights",
    "heat_model",
    "burgers_model",
    "divergence_form_model",
    "adversarial_model",
    "build_model",
    "fit_constants",
    "condition_margin",
    "check_condition",
    "check_all_conditions",
    "CONDITION_NAMES",
]

#: Margin threshold below which a sampled condition is declared failed.
MARGIN_FLOOR = -1e-9

#: Maximum number of failing samples recorded in a report.
MAX_WITNESSES = 5

#: Discrete Poincare constant bound: smallest eigenvalue of the 1-D
#: Dirichlet second-difference matrix is (4/h^2) sin^2(pi h / 2) >= 8 for
#: every admissible spacing h <= 1/2, so |u|_H <= |grad u|_H / sqrt(8).
POINCARE = 1.0 / np.sqrt(8.0)


# -- term containers -----------------------------------------------------------


@dataclass(frozen=True)
class ReactionTerm:
    """Reaction ``theta(B, x, t)``: tested against the perturbation itself.

    ``func``/``deriv`` map ``(B, x, t) -> array like B`` elementwise;
    ``deriv`` is d(theta)/dB.  ``lipschitz`` bounds ``|deriv|`` globally;
    ``dissipation`` is the declared one-sided bound rho with
    ``B * theta(B, x, t) <= rho (B^2 + 1)``.
    """

    func: Callable
    deriv: Callable
    lipschitz: float
    dissipation: float = 0.0


@dataclass(frozen=True)
class FluxTerm:
    """Matrix flux ``xi(B, x, t)``: tested against perturbation gradients.

    ``func``/``deriv`` have signature ``(B, x, t, axis) -> array like B``
    returning one spatial component at a time.  ``lipschitz`` bounds the
    total derivative magnitude.
    """

    func: Callable
    deriv: Callable
    lipschitz: float


@dataclass(frozen=True)
class ScalarFluxTerm:
    """Burgers-type flux ``F(u)``; same calling convention as :class:`FluxTerm`.

    ``cap`` is the truncation level U_max making F globally Lipschitz with
    constant ``lipschitz``.
    """

    func: Callable
    deriv: Callable
    lipschitz: float
    cap: float


@dataclass(frozen=True)
class ConditionConstants:
    """Fitted constants entering the sampled structural inequalities."""

    growth_c0: float
    deriv_g: float
    deriv_mu: float
    mono_ghat: float
    mono_muhat: float
    pos_ctilde: float
    pos_mubar: float
    uniconv_c0: float
    lipschitz_c: float


@dataclass(frozen=True)
class ModelSpec:
    """A dissipation density plus optional divergence-form drift terms.

    ``lam`` is the binary switch of the trajectory functional: 1 couples the
    density to the state (gradient-flow structure), 0 leaves only the dual
    residual term.
    """

    name: str
    density: PowerDensity
    lam: int = 1
    reaction: Optional[ReactionTerm] = None
    flux: Optional[FluxTerm] = None
    scalar_flux: Optional[ScalarFluxTerm] = None
    constants: Optional[ConditionConstants] = None

    def __post_init__(self):
        if self.lam not in (0, 1):
            raise ValueError(f"lam must be 0 or 1, got {self.lam}")
        if self.density.exponent > 2.0 and self.density.regularizer <= 0.0:
            raise ValueError(
                "exponent > 2 requires a positive regularizer: the assembled "
                "dual solves need a strongly monotone gradient at the origin"
            )
        if self.constants is None:
            object.__setattr__(self, "constants", fit_constants(self))

    @property
    def has_terms(self) -> bool:
        return any(t is not None for t in (self.reaction, self.flux,
                                           self.scalar_flux))


# -- integrated dissipation machinery -------------------------------------------


def psi_total(density: PowerDensity, grid: SpaceGrid, values):
    """Integrated density ``sum_edges h^d psi(grad u)``, batched in front."""
    arr = _to_batch(values, grid)
    single = arr.ndim == grid.dim + 1
    if single:
        arr = arr[None, ...]
    spatial = tuple(range(-grid.dim, 0))
    acc = None
    for mag in grad_magnitudes(grid, arr):
        term = grid.cell_volume * np.sum(radial_value(density, mag), axis=spatial)
        acc = term if acc is None else acc + term
    return float(acc[0]) if single else acc


def psi_grad_edges(density: PowerDensity, grid: SpaceGrid, values) -> list:
    """Per-axis edge values of ``Dpsi(grad u)`` (radial gradient law)."""
    arr = _to_batch(values, grid)
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    comp = -(grid.dim + 1)
    out = []
    for g in gradient(grid, arr):
        mag = np.sqrt(np.sum(g**2, axis=comp, keepdims=True))
        if q == 2.0:
            coef = a + eps
        else:
            coef = a * mag ** (q - 2.0) + eps
        out.append(coef * g)
    return out


def psi_gradient_density(density: PowerDensity, grid: SpaceGrid, values):
    """Nodal density of the integrated-density gradient: ``-div(Dpsi(grad u))``."""
    return -divergence(grid, psi_grad_edges(density, grid, values))


def psi_hessian_edge_weights(density: PowerDensity, grid: SpaceGrid, values) -> list:
    """Per-axis flat edge weights of ``D^2 psi`` for scalar fields.

    For one-component fields the second derivative along each edge is the
    scalar ``a (q-1) |g|^{q-2} + eps``, which assembles the SPD weighted
    Laplacian used by the dual Newton solves and the implicit stepper.
    """
    arr = _to_batch(values, grid)
    if arr.shape[-(grid.dim + 1)] != 1:
        raise ValueError("hessian edge weights require a one-component field")
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    weights = []
    for g in gradient(grid, arr):
        mag = np.abs(np.squeeze(g, axis=-(grid.dim + 1)))
        if q == 2.0:
            w = np.full_like(mag, a + eps)
        else:
            w = a * (q - 1.0) * mag ** (q - 2.0) + eps
        weights.append(w.reshape(*w.shape[: -grid.dim], -1))
    return weights


# -- Lambda assembly -------------------------------------------------------------


def _to_batch(values, grid: SpaceGrid) -> np.ndarray:
    if isinstance(values, Field):
        return values.values
    arr = np.asarray(values, dtype=float)
    if arr.ndim == grid.dim:
        arr = arr[None, ...]
    return arr


def _time_broadcast(t, extra_axes: int):
    arr = np.asarray(t, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    return arr.reshape(arr.shape + (1,) * extra_axes)


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        idx = tuple(np.argwhere(~np.isfinite(arr))[0])
        raise ModelEvaluationError(f"{what} produced non-finite value at index {idx}")


def _edge_flux(model: ModelSpec, grid: SpaceGrid, B: np.ndarray, t) -> list:
    """Flux terms sampled on the padded lattice and averaged onto edges."""
    edges = []
    tb = _time_broadcast(t, grid.dim)
    for axis in range(grid.dim):
        pad_width = [(0, 0)] * B.ndim
        pad_width[B.ndim - grid.dim + axis] = (1, 1)
        b_pad = np.pad(B, pad_width)
        x_pad = grid.padded_coords(axis)
        w = None
        for term, what in ((model.flux, "flux"), (model.scalar_flux, "scalar flux")):
            if term is None:
                continue
            val = term.func(b_pad, x_pad, tb, axis)
            _check_finite(val, f"{what} term of model '{model.name}'")
            w = val if w is None else w + val
        ax = w.ndim - grid.dim + axis
        lo = [slice(None)] * w.ndim
        hi = [slice(None)] * w.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        edges.append(0.5 * (w[tuple(lo)] + w[tuple(hi)]))
    return edges


def lambda_density(model: ModelSpec, grid: SpaceGrid, values, t):
    """Nodal density of ``Lambda_t(u)``; batched over leading axes.

    ``values`` has shape ``(..., k, *grid.shape)`` (k = 1 whenever the model
    carries terms); ``t`` is a scalar or an array matching the batch prefix.
    """
    arr = _to_batch(values, grid)
    out = np.zeros_like(arr)
    if not model.has_terms:
        return out
    if arr.shape[-(grid.dim + 1)] != 1:
        raise ValueError(f"model '{model.name}' carries terms and needs scalar fields")
    comp = -(grid.dim + 1)
    B = np.squeeze(arr, axis=comp)
    acc = np.zeros_like(B)
    if model.flux is not None or model.scalar_flux is not None:
        edges = [np.expand_dims(e, comp) for e in _edge_flux(model, grid, B, t)]
        acc = acc + np.squeeze(-divergence(grid, edges), axis=comp)
    if model.reaction is not None:
        tb = _time_broadcast(t, grid.dim)
        theta = model.reaction.func(B, grid.node_coords, tb)
        _check_finite(theta, f"reaction term of model '{model.name}'")
        acc = acc - theta
    out = np.expand_dims(acc, comp)
    return out


def apply_lambda(model: ModelSpec, u: Field, t: float) -> Field:
    """Field-level wrapper of :func:`lambda_density` (dual-density output)."""
    return Field(u.grid, lambda_density(model, u.grid, u, float(t)))


def _interior_flux_deriv(model: ModelSpec, grid: SpaceGrid, B, t, axis: int):
    tb = _time_broadcast(t, grid.dim)
    total = None
    for term in (model.flux, model.scalar_flux):
        if term is None:
            continue
        val = term.deriv(B, grid.node_coords, tb, axis)
        total = val if total is None else total + val
    return total


def dlambda_density(model: ModelSpec, grid: SpaceGrid, values, t, direction):
    """Directional derivative ``DLambda_t(u) . delta`` as a nodal density."""
    arr = _to_batch(values, grid)
    dlt = _to_batch(direction, grid)
    out = np.zeros(np.broadcast_shapes(arr.shape, dlt.shape))
    if not model.has_terms:
        return out
    comp = -(grid.dim + 1)
    B = np.squeeze(arr, axis=comp)
    D = np.squeeze(dlt, axis=comp)
    acc = np.zeros(np.broadcast_shapes(B.shape, D.shape))
    if model.flux is not None or model.scalar_flux is not None:
        edges = []
        for axis in range(grid.dim):
            c = _interior_flux_deriv(model, grid, B, t, axis)
            w = (c * D).reshape(-1, grid.n_nodes)
            e = (grid.avg_ops[axis] @ w.T).T
            edges.append(np.expand_dims(
                e.reshape(*acc.shape[: -grid.dim], *grid.edge_shape(axis)), comp))
        acc = acc + np.squeeze(-divergence(grid, edges), axis=comp)
    if model.reaction is not None:
        tb = _time_broadcast(t, grid.dim)
        acc = acc - model.reaction.deriv(B, grid.node_coords, tb) * D
    return np.expand_dims(acc, comp)


def dlambda_matrix(model: ModelSpec, grid: SpaceGrid, values, t):
    """Sparse nodal Jacobian of the drift density at one scalar state.

    Matches :func:`dlambda_density` as a matrix acting on flattened nodal
    vectors; used by implicit steppers that need a factorizable Jacobian.
    """
    arr = _to_batch(values, grid)
    if arr.ndim != grid.dim + 1 or arr.shape[0] != 1:
        raise ValueError("drift Jacobian assembly needs a single scalar field")
    n = grid.n_nodes
    mat = sp.csr_matrix((n, n))
    if not model.has_terms:
        return mat
    B = arr[0]
    if model.flux is not None or model.scalar_flux is not None:
        for axis in range(grid.dim):
            c = _interior_flux_deriv(model, grid, B, t, axis)
            mat = mat + grid.diff_ops[axis].T @ grid.avg_ops[axis] @ \
                sp.diags_array([np.asarray(c, dtype=float).ravel()], offsets=[0])
    if model.reaction is not None:
        tb = _time_broadcast(t, grid.dim)
        thetap = model.reaction.deriv(B, grid.node_coords, tb)
        mat = mat - sp.diags_array(
            [np.broadcast_to(thetap, grid.shape).ravel().astype(float)],
            offsets=[0])
    return mat.tocsr()


def dlambda_adjoint_density(model: ModelSpec, grid: SpaceGrid, values, t, covector):
    """Adjoint ``DLambda_t(u)^T B`` as a nodal density.

    Satisfies ``<B, DLambda(u) . delta> = <delta, DLambda(u)^T B>`` in the
    volume-weighted pairing, exactly (up to roundoff) by construction.
    """
    arr = _to_batch(values, grid)
    cov = _to_batch(covector, grid)
    out = np.zeros(np.broadcast_shapes(arr.shape, cov.shape))
    if not model.has_terms:
        return out
    comp = -(grid.dim + 1)
    B = np.squeeze(arr, axis=comp)
    C = np.squeeze(cov, axis=comp)
    acc = np.zeros(np.broadcast_shapes(B.shape, C.shape))
    if model.flux is not None or model.scalar_flux is not None:
        grads = gradient(grid, cov)
        for axis in range(grid.dim):
            v = np.squeeze(grads[axis], axis=comp)
            n_edges = int(np.prod(v.shape[-grid.dim:]))
            vt = (grid.avg_ops[axis].T @ v.reshape(-1, n_edges).T).T
            vt = vt.reshape(*v.shape[: -grid.dim], *grid.shape)
            c = _interior_flux_deriv(model, grid, B, t, axis)
            acc = acc + c * vt
    if model.reaction is not None:
        tb = _time_broadcast(t, grid.dim)
        acc = acc - model.reaction.deriv(B, grid.node_coords, tb) * C
    return np.expand_dims(acc, comp)


# -- built-in models --------------------------------------------------------------


def _truncated_square(u, cap: float):
    """C^1 truncation of ``u^2 / 2`` beyond ``|u| = cap`` (linear growth)."""
    au = np.abs(u)
    return np.where(au <= cap, 0.5 * u**2, cap * au - 0.5 * cap**2)


def _truncated_square_deriv(u, cap: float):
    return np.clip(u, -cap, cap)


def heat_model(a: float = 1.0) -> ModelSpec:
    """Plain gradient flow of the Dirichlet energy ``(a/2)|grad u|^2``."""
    return ModelSpec(name="heat", density=PowerDensity(a, 2.0, 0.0), lam=1)


def burgers_model(a: float = 1.0, u_max: float = 10.0) -> ModelSpec:
    """Viscous Burgers drift: flux ``F(u) = u^2/2`` truncated at ``u_max``.

    The truncation keeps F globally Lipschitz (constant ``u_max``) without
    touching states of the expected magnitude.  The flux acts along the
    first spatial axis.
    """

    def f(u, x, t, axis):
        if axis != 0:
            return np.zeros_like(u)
        return _truncated_square(u, u_max)

    def fprime(u, x, t, axis):
        if axis != 0:
            return np.zeros_like(u)
        return _truncated_square_deriv(u, u_max)

    return ModelSpec(
        name="burgers",
        density=PowerDensity(a, 2.0, 0.0),
        lam=1,
        scalar_flux=ScalarFluxTerm(func=f, deriv=fprime, lipschitz=u_max,
                                   cap=u_max),
    )


def divergence_form_model(q: float, a: float = 1.0, eps: float | None = None,
                          flux_amp: float = 0.4, flux_cap: float = 2.0,
                          reaction_const: float = 0.5,
                          reaction_slope: float = 1.0) -> ModelSpec:
    """Divergence-form model with truncated-polynomial flux and affine reaction.

    ``xi(B) = flux_amp * trunc(B^2/2)`` along the first axis and
    ``theta(B) = reaction_const - reaction_slope * B``; for ``q > 2`` the
    density carries a quadratic regularizer (default 1) so the dual solves
    stay uniformly elliptic.
    """
    if q not in (2.0, 4.0):
        raise ValueError(f"divergence-form model supports q in {{2, 4}}, got {q}")
    if eps is None:
        eps = 0.0 if q == 2.0 else 1.0

    def xi(u, x, t, axis):
        if axis != 0:
            return np.zeros_like(u)
        return flux_amp * _truncated_square(u, flux_cap)

    def xiprime(u, x, t, axis):
        if axis != 0:
            return np.zeros_like(u)
        return flux_amp * _truncated_square_deriv(u, flux_cap)

    def theta(u, x, t):
        return reaction_const - reaction_slope * u

    def thetaprime(u, x, t):
        return np.broadcast_to(-reaction_slope, np.shape(u)).astype(float)

    # one-sided bound: B(c - sB) <= c^2/(4s) pointwise (s > 0)
    rho = reaction_const**2 / (4.0 * reaction_slope) if reaction_slope > 0 \
        else abs(reaction_const)
    model = ModelSpec(
        name=f"divergence_form_q{int(q)}",
        density=PowerDensity(a, q, eps),
        lam=1,
        reaction=ReactionTerm(func=theta, deriv=thetaprime,
                              lipschitz=reaction_slope, dissipation=rho),
        flux=FluxTerm(func=xi, deriv=xiprime, lipschitz=flux_amp * flux_cap),
    )
    if q == 4.0:
        # Sample-range-fitted uniform-convexity constant: the regularizer
        # only controls the quadratic part of the gap, so the constant is
        # calibrated against the checker's sampling distribution.
        model = replace(model, constants=replace(model.constants, uniconv_c0=2.0e5))
    return model


def adversarial_model(kappa: float = 50.0, a: float = 1.0) -> ModelSpec:
    """Reaction ``theta(B) = +kappa B`` declared as non-pumping (rho = 0).

    The declaration is deliberately wrong: the drift feeds energy in at rate
    kappa, so the positivity check fails with explicit witnesses while the
    purely Lipschitz-based conditions still pass.  Used to demonstrate that
    the checkers catch broken structural certificates.
    """

    def theta(u, x, t):
        return kappa * u

    def thetaprime(u, x, t):
        return np.broadcast_to(float(kappa), np.shape(u)).astype(float)

    return ModelSpec(
        name="adversarial",
        density=PowerDensity(a, 2.0, 0.0),
        lam=1,
        reaction=ReactionTerm(func=theta, deriv=thetaprime, lipschitz=kappa,
                              dissipation=0.0),
    )


_BUILDERS = {
    "heat": heat_model,
    "burgers": burgers_model,
    "divergence_form": divergence_form_model,
    "adversarial": adversarial_model,
}


def build_model(name: str, **params) -> ModelSpec:
    """Construct a built-in model by name (heat, burgers, divergence_form,
    adversarial)."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown model '{name}'; available: {sorted(_BUILDERS)}")
    return _BUILDERS[name](**params)


# -- fitted constants --------------------------------------------------------------


def fit_constants(model: ModelSpec) -> ConditionConstants:
    """Derive structural-inequality constants from declared Lipschitz data.

    The derivations are Young-inequality arithmetic: the flux pairing is
    bounded by ``L |h|_H |grad h|_2`` and absorbed into the uniformly convex
    part of the density, the reaction by its Lipschitz constant or its
    declared one-sided bound.  A factor-two safety margin is applied
    throughout.
    """
    a = model.density.coefficient
    q = model.density.exponent
    eps = model.density.regularizer
    qstar = q / (q - 1.0)
    l_theta = model.reaction.lipschitz if model.reaction else 0.0
    rho = model.reaction.dissipation if model.reaction else 0.0
    l_flux = (model.flux.lipschitz if model.flux else 0.0) + \
        (model.scalar_flux.lipschitz if model.scalar_flux else 0.0)
    c_unif = eps + (a if q == 2.0 else 0.0)

    growth_c0 = 2.0 * max(q / a, a / q + eps + 1.0)
    deriv_g = 2.0 * (l_flux * POINCARE + l_theta * POINCARE**2) + 1.0
    mono_ghat = l_theta + (l_flux**2) / (4.0 * c_unif) + 1.0 if c_unif > 0 \
        else l_theta + 1.0
    # positivity: absorb c_absorb * |x|_X^q of the flux pairing into the
    # density's (a/q) |x|_X^q; Young constant for s*t <= c t^q + Cy s^{q*}
    c_absorb = a / (2.0 * q)
    cy = 1.0 / (qstar * (q * c_absorb) ** (qstar / q))
    s_slope = np.sqrt(2.0) * l_flux
    pos_mubar = rho + cy * (2.0**qstar) * (s_slope**qstar + 1.0) + 1.0
    uniconv_c0 = 2.0 / c_unif if q == 2.0 else 4.0 / eps
    lipschitz_c = deriv_g

    return ConditionConstants(
        growth_c0=float(growth_c0),
        deriv_g=float(deriv_g),
        deriv_mu=1.0,
        mono_ghat=float(mono_ghat),
        mono_muhat=1.0,
        pos_ctilde=float(2.0 * q / a),
        pos_mubar=float(pos_mubar),
        uniconv_c0=float(uniconv_c0),
        lipschitz_c=float(lipschitz_c),
    )


# -- sampled condition checks --------------------------------------------------------


@dataclass
class ConditionReport:
    """Outcome of a sampled structural-condition check."""

    condition: str
    samples: int
    worst_margin: float
    witnesses: list
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "condition": self.condition,
            "samples": self.samples,
            "worst_margin": self.worst_margin,
            "witnesses": self.witnesses,
            "verdict": "pass" if self.passed else "fail",
        }


def _sample_field(grid: SpaceGrid, rng, amplitude: float) -> np.ndarray:
    """Random scalar field: white noise or a smoothed, amplitude-matched one.

    Half of the draws are Poisson-smoothed so the sampler exercises both the
    rough regime (stressing gradient terms) and the smooth large-scale
    regime (stressing reaction signs).
    """
    raw = rng.normal(size=(1,) + grid.shape)
    if rng.uniform() < 0.5:
        return amplitude * raw
    z = poisson_solve(grid, raw)
    peak = np.max(np.abs(z))
    return amplitude * z / max(peak, 1e-30)


def _as_sample(x, grid: SpaceGrid) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != grid.shape:
        raise ValueError(f"sample shape {arr.shape} != grid shape {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError("sample field contains non-finite entries")
    return arr


def _psi_pair_gap(model, grid, base, bump):
    """<bump, Dpsi_int(base + bump) - Dpsi_int(base)> via edge values."""
    d = model.density
    lhs = 0.0
    for ga, gb, gh in zip(psi_grad_edges(d, grid, base + bump),
                          psi_grad_edges(d, grid, base),
                          gradient(grid, bump)):
        lhs += grid.cell_volume * float(np.sum((ga - gb) * gh))
    return lhs


def _margin_growth(model, grid, x, h, t):
    c0 = model.constants.growth_c0
    q = model.density.exponent
    val = psi_total(model.density, grid, x)
    xq = grad_norm(grid, x, q) ** q
    upper = c0 * xq + c0 - val
    lower = val - (xq / c0 - c0)
    scale = max(1.0, abs(val), c0 * xq + c0)
    return min(upper, lower) / scale


def _margin_deriv_growth(model, grid, x, h, t):
    q = model.density.exponent
    qstar = q / (q - 1.0)
    dl = dlambda_density(model, grid, x, t, h)
    lhs = dual_grad_norm(grid, dl, qstar)
    g, mu = model.constants.deriv_g, model.constants.deriv_mu
    rhs = g * (grad_norm(grid, x, q) ** (q - 2.0)
               + mu ** ((q - 2.0) / q)) * grad_norm(grid, h, q)
    scale = max(1.0, lhs, rhs)
    return (rhs - lhs) / scale


def _margin_monotonicity(model, grid, x, h, t):
    lhs = 0.0
    if model.lam:
        lhs += _psi_pair_gap(model, grid, x, h)
    lhs += h_inner(grid, h, dlambda_density(model, grid, x, t, h))
    ghat, muhat = model.constants.mono_ghat, model.constants.mono_muhat
    q = model.density.exponent
    hh = h_inner(grid, h, h)
    rhs = ghat * (grad_norm(grid, x, q) ** q + muhat) * hh
    scale = max(1.0, abs(lhs), rhs)
    return (lhs + rhs) / scale


def _margin_positivity(model, grid, x, h, t):
    q = model.density.exponent
    val = psi_total(model.density, grid, x)
    pair = h_inner(grid, x, lambda_density(model, grid, x, t))
    ctilde, mubar = model.constants.pos_ctilde, model.constants.pos_mubar
    xq = grad_norm(grid, x, q) ** q
    lhs = val + pair
    rhs = xq / ctilde - mubar * (h_inner(grid, x, x) + 1.0)
    scale = max(1.0, abs(lhs), abs(rhs))
    return (lhs - rhs) / scale


def _margin_uniform_convexity(model, grid, x, h, t):
    q = model.density.exponent
    lhs = _psi_pair_gap(model, grid, x, h)
    c0 = model.constants.uniconv_c0
    rhs = (grad_norm(grid, x, q) ** (q - 2.0) + 1.0) * grad_norm(grid, h, q) ** 2 / c0
    scale = max(1.0, abs(lhs), rhs)
    return (lhs - rhs) / scale


def _margin_lipschitz(model, grid, x, h, t):
    q = model.density.exponent
    qstar = q / (q - 1.0)
    du = lambda_density(model, grid, x, t) - lambda_density(model, grid, h, t)
    lhs = dual_grad_norm(grid, du, qstar)
    rhs = model.constants.lipschitz_c * grad_norm(grid, x - h, q)
    scale = max(1.0, lhs, rhs)
    return (rhs - lhs) / scale


#: condition name -> (margin function, needs a second sample field)
_CONDITIONS = {
    "growth": (_margin_growth, False),
    "deriv_growth": (_margin_deriv_growth, True),
    "monotonicity": (_margin_monotonicity, True),
    "positivity": (_margin_positivity, False),
    "uniform_convexity": (_margin_uniform_convexity, True),
    "lipschitz": (_margin_lipschitz, True),
}

CONDITION_NAMES = tuple(_CONDITIONS)


def condition_margin(model: ModelSpec, grid: SpaceGrid, condition: str, x,
                     h=None, t: float = 0.0) -> float:
    """Normalised margin of one structural inequality at an explicit sample.

    Nonnegative means the inequality holds there.  Pair conditions
    (derivative growth, monotonicity, uniform convexity, Lipschitz) require
    the second field ``h``.
    """
    if condition not in _CONDITIONS:
        raise ValueError(
            f"unknown condition '{condition}'; available: {sorted(_CONDITIONS)}")
    fn, needs_h = _CONDITIONS[condition]
    xa = _as_sample(x, grid)
    ha = None
    if needs_h:
        if h is None:
            raise ValueError(f"condition '{condition}' needs a second field")
        ha = _as_sample(h, grid)
    return float(fn(model, grid, xa, ha, float(t)))


def check_condition(model: ModelSpec, grid: SpaceGrid, condition: str, *,
                    samples: int = 1000, seed: int = 0, amplitude: float = 1.0,
                    t_range=(0.0, 1.0)) -> ConditionReport:
    """Sample a structural inequality; pass iff the worst normalised margin
    stays above ``-1e-9``.

    Each sample draws its own RNG stream from ``(seed, condition, index)``,
    so results are reproducible and independent of evaluation order (the
    sample loop parallelises under ``BEN_THREADS``).
    """
    if condition not in _CONDITIONS:
        raise ValueError(
            f"unknown condition '{condition}'; available: {sorted(_CONDITIONS)}")
    margin_fn, needs_h = _CONDITIONS[condition]
    cond_tag = sorted(_CONDITIONS).index(condition)

    def one(i: int):
        rng = np.random.default_rng([seed, cond_tag, i])
        t = float(rng.uniform(*t_range))
        x = _sample_field(grid, rng, amplitude)
        h = _sample_field(grid, rng, amplitude) if needs_h else None
        return float(margin_fn(model, grid, x, h, t)), x, h, t

    results = map_indexed(one, samples)
    worst = min(m for m, _, _, _ in results)
    witnesses = []
    for m, x, h, t in results:
        if m < MARGIN_FLOOR and len(witnesses) < MAX_WITNESSES:
            wit = {"margin": m, "t": t, "x": np.asarray(x).ravel().tolist()}
            if h is not None:
                wit["h"] = np.asarray(h).ravel().tolist()
            witnesses.append(wit)
    return ConditionReport(condition=condition, samples=samples,
                           worst_margin=worst, witnesses=witnesses,
                           passed=worst >= MARGIN_FLOOR)


def check_all_conditions(model: ModelSpec, grid: SpaceGrid, *, samples=1000,
                         seed=0, amplitude=1.0, t_range=(0.0, 1.0)) -> list:
    """Run every named condition; returns the list of reports."""
    return [
        check_condition(model, grid, name, samples=samples, seed=seed,
                        amplitude=amplitude, t_range=t_range)
        for name in CONDITION_NAMES
    ]
