"""Pointwise convex densities and their Legendre-Fenchel transforms.

The dissipation densities used throughout the package are radial power laws

    psi(xi) = (a/q) |xi|^q + (eps/2) |xi|^2,      a > 0, q >= 2, eps >= 0,

acting on vectors (or flattened matrices) ``xi``.  Everything downstream
needs three operations on such a density: evaluation, the gradient
``Dpsi(xi) = (a |xi|^{q-2} + eps) xi``, and the Legendre-Fenchel conjugate

    psi*(y) = sup_z { <z, y> - psi(z) },

together with its maximiser ``z* = Dpsi^{-1}(y)``.  Because psi is radial,
the conjugate reduces to the scalar monotone equation

    a r^{q-1} + eps r = |y|

for the radius ``r = |z*|``, solved here by a guarded Newton iteration with
a bisection fallback.  The solve is cheap, vectorises over batches of radii,
and is accurate to machine precision, which the Fenchel-Young based
certificates downstream rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConjugateSolveError, NonFiniteInputError

__all__ = [
    "PowerDensity",
    "ConjugateValue",
    "eval_psi",
    "grad_psi",
    "hess_psi",
    "eval_conjugate",
    "fenchel_gap",
    "conjugate_exponent",
    "radial_value",
    "radial_slope",
    "conjugate_radius",
]

#: Default residual tolerance for the radial Newton solve.  The residual is
#: measured relative to max(1, |y|); two extra polishing steps after first
#: satisfaction push the root to machine accuracy.
NEWTON_TOL = 1e-13

#: Hard cap on Newton/bisection iterations for the radial solve.
NEWTON_MAX_ITERS = 200


@dataclass(frozen=True)
class PowerDensity:
    """Radial density ``(a/q)|xi|^q + (eps/2)|xi|^2``.

    Parameters
    ----------
    coefficient : float
        Leading coefficient ``a``; must be positive.
    exponent : float
        Power ``q``; must satisfy ``q >= 2``.
    regularizer : float, optional
        Quadratic coefficient ``eps``; must be nonnegative.  A positive
        value makes the gradient strongly monotone near the origin, which
        the assembled dual solves require when ``q > 2``.
    """

    coefficient: float
    exponent: float
    regularizer: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.coefficient) or self.coefficient <= 0.0:
            raise ValueError(f"coefficient must be positive, got {self.coefficient}")
        if not np.isfinite(self.exponent) or self.exponent < 2.0:
            raise ValueError(f"exponent must be >= 2, got {self.exponent}")
        if not np.isfinite(self.regularizer) or self.regularizer < 0.0:
            raise ValueError(f"regularizer must be >= 0, got {self.regularizer}")


@dataclass(frozen=True)
class ConjugateValue:
    """Result of a conjugate evaluation ``psi*(y)``.

    Attributes
    ----------
    value : float
        The conjugate value.
    argmax : numpy.ndarray
        The maximiser ``z*`` of ``<z, y> - psi(z)``; equals ``Dpsi^{-1}(y)``.
    newton_iters : int
        Iterations used by the radial root solve.
    """

    value: float
    argmax: np.ndarray
    newton_iters: int


def conjugate_exponent(q: float) -> float:
    """Dual exponent ``q* = q / (q - 1)``."""
    return q / (q - 1.0)


def _as_clean_array(xi, name: str) -> np.ndarray:
    arr = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains non-finite components")
    return arr


# -- radial machinery (vectorised over arrays of magnitudes) -----------------


def radial_value(density: PowerDensity, s):
    """psi as a function of the magnitude ``s = |xi| >= 0``."""
    s = np.asarray(s, dtype=float)
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    return (a / q) * s**q + 0.5 * eps * s**2


def radial_slope(density: PowerDensity, s):
    """d/ds of the radial profile: ``a s^{q-1} + eps s``."""
    s = np.asarray(s, dtype=float)
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    return a * s ** (q - 1.0) + eps * s


def _radial_curvature(density, r):
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(r > 0.0, a * (q - 1.0) * r ** (q - 2.0), a * (q == 2.0))
    return p + eps


def conjugate_radius(density: PowerDensity, s, tol: float = NEWTON_TOL,
                     max_iters: int = NEWTON_MAX_ITERS):
    """Solve ``a r^{q-1} + eps r = s`` for ``r >= 0``, elementwise.

    Newton iteration started from the upper end of the bracket
    ``[0, max(1, s)^{1/(q-1)} a^{-1/(q-1)} + s / max(eps, 1)]``; since the
    profile is convex and increasing, Newton from above decreases
    monotonically onto the root, and a bisection step guards every update
    that would leave the bracket.  Returns ``(r, iterations)`` where
    ``iterations`` is the worst case over the batch.
    """
    s = np.asarray(s, dtype=float)
    scalar_in = s.ndim == 0
    s = np.atleast_1d(s).copy()
    if np.any(s < 0.0):
        raise ValueError("magnitudes must be nonnegative")
    a, q, eps = density.coefficient, density.exponent, density.regularizer

    if q == 2.0:
        r = s / (a + eps)
        return (float(r[0]) if scalar_in else r), 0

    lo = np.zeros_like(s)
    hi = np.maximum(1.0, s) ** (1.0 / (q - 1.0)) * a ** (-1.0 / (q - 1.0))
    hi = hi + s / max(eps, 1.0)
    r = hi.copy()
    r[s == 0.0] = 0.0

    target_tol = tol * np.maximum(1.0, s)
    # Number of iterations each entry still needs after first hitting the
    # tolerance; two polish steps sharpen the root to machine precision.
    # Zero magnitudes are exact already and must not enter the bisection
    # guard (which would nudge them off the lower bracket end).
    polish = np.where(s == 0.0, -1, 2)
    worst_iters = 0
    for it in range(max_iters):
        f = a * r ** (q - 1.0) + eps * r - s
        done = np.abs(f) <= target_tol
        polish = np.where(done, polish - 1, 2)
        active = polish >= 0
        if not np.any(active):
            break
        worst_iters = it + 1
        lo = np.where(f < 0.0, np.maximum(lo, r), lo)
        hi = np.where(f > 0.0, np.minimum(hi, r), hi)
        fp = a * (q - 1.0) * r ** (q - 2.0) + eps
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(fp > 0.0, f / fp, 0.0)
        r_new = r - step
        out = (r_new <= lo) | (r_new >= hi) | ~np.isfinite(r_new)
        r_new = np.where(out & active, 0.5 * (lo + hi), r_new)
        r = np.where(active, r_new, r)
    else:
        f = a * r ** (q - 1.0) + eps * r - s
        bad = np.abs(f) > target_tol
        if np.any(bad):
            idx = int(np.argmax(np.abs(f)))
            raise ConjugateSolveError(
                f"radial conjugate solve failed to converge for |y|={s[idx]:.6g}",
                residual=float(np.max(np.abs(f))),
                iterations=max_iters,
            )
    return (float(r[0]) if scalar_in else r), worst_iters


# -- public pointwise operations ---------------------------------------------


def eval_psi(density: PowerDensity, xi) -> float:
    """Evaluate ``psi(xi)`` for a vector (any shape; Frobenius magnitude)."""
    arr = _as_clean_array(xi, "xi")
    return float(radial_value(density, np.linalg.norm(arr)))


def grad_psi(density: PowerDensity, xi) -> np.ndarray:
    """Gradient ``Dpsi(xi) = (a |xi|^{q-2} + eps) xi``, same shape as xi."""
    arr = _as_clean_array(xi, "xi")
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    s = np.linalg.norm(arr)
    if s == 0.0:
        coef = eps + (a if q == 2.0 else 0.0)
    else:
        coef = a * s ** (q - 2.0) + eps
    return coef * arr


def hess_psi(density: PowerDensity, xi) -> np.ndarray:
    """Hessian ``D^2 psi(xi)`` as a dense matrix on the flattened vector."""
    arr = _as_clean_array(xi, "xi").ravel()
    n = arr.size
    a, q, eps = density.coefficient, density.exponent, density.regularizer
    s = np.linalg.norm(arr)
    eye = np.eye(n)
    if s == 0.0:
        return (eps + (a if q == 2.0 else 0.0)) * eye
    outer = np.outer(arr, arr) / s**2
    return (a * s ** (q - 2.0) + eps) * eye + a * (q - 2.0) * s ** (q - 2.0) * outer


def eval_conjugate(density: PowerDensity, y, tol: float = NEWTON_TOL,
                   max_iters: int = NEWTON_MAX_ITERS) -> ConjugateValue:
    """Legendre-Fenchel conjugate ``psi*(y)`` with maximiser.

    Parameters
    ----------
    density : PowerDensity
    y : array_like
        Dual vector (any shape).
    tol : float, optional
        Residual tolerance of the radial root solve, relative to
        ``max(1, |y|)``.
    max_iters : int, optional
        Iteration cap; exceeding it raises :class:`ConjugateSolveError`.

    Returns
    -------
    ConjugateValue
        ``value = <z*, y> - psi(z*)`` and ``argmax = z*``.
    """
    arr = _as_clean_array(y, "y")
    s = float(np.linalg.norm(arr))
    r, iters = conjugate_radius(density, s, tol=tol, max_iters=max_iters)
    if s == 0.0:
        argmax = np.zeros_like(arr)
    else:
        argmax = (r / s) * arr
    value = r * s - float(radial_value(density, r))
    return ConjugateValue(value=value, argmax=argmax, newton_iters=iters)


def fenchel_gap(density: PowerDensity, x, y) -> float:
    """Fenchel-Young gap ``psi(x) + psi*(y) - <x, y>`` (nonnegative).

    Zero exactly when ``y = Dpsi(x)``; the gap is the pointwise optimality
    certificate used by the trajectory energy.
    """
    xa = _as_clean_array(x, "x")
    ya = _as_clean_array(y, "y")
    if xa.shape != ya.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {ya.shape}")
    pairing = float(np.vdot(xa, ya))
    return eval_psi(density, xa) + eval_conjugate(density, ya).value - pairing
