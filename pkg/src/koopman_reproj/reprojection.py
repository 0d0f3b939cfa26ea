"""Weighted closest-point reprojection onto the lifted-state manifold.

For a PSD weight ``W`` the reprojection of ``z`` is a minimiser of
``|Psi(x) - z|_W^2`` over states ``x``.  Three routes are provided: reading
the state off the witness entries (coordinate projection), a Newton method
in state coordinates, and an exhaustive grid search used as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceSurrogate, regularized
from .dictionary import MonomialDictionary
from .dynamics import Box

__all__ = [
    "WeightMatrix",
    "ProjectionResult",
    "GridTooLargeError",
    "objective",
    "coordinate_weight",
    "coordinate_project",
    "newton_project",
    "brute_force_project",
    "GridOracle",
    "ml_weight",
    "covariance_weight",
]

PINV_CUTOFF = 1e-12
MAX_GRID_EVALS = 10**8


class GridTooLargeError(ValueError):
    """The requested brute-force grid exceeds the evaluation budget."""


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric PSD weight defining ``|v|_W^2 = v^T W v``."""

    W: np.ndarray
    kind: str = "custom"
    factor: np.ndarray | None = None  # R with W = R^T R; derived from W when omitted

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError(f"weight must be square, got {W.shape}")
        if not np.allclose(W, W.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(W).max(initial=0.0))):
            raise ValueError("weight matrix is not symmetric")
        if self.kind not in ("coordinate", "inverse_covariance", "custom"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        object.__setattr__(self, "W", W)
        if self.factor is None:
            lam, V = np.linalg.eigh(W)
            R = np.sqrt(np.clip(lam, 0.0, None))[:, None] * V.T
        else:
            R = np.asarray(self.factor, dtype=float)
            if R.ndim != 2 or R.shape[1] != W.shape[0]:
                raise ValueError(f"weight factor has shape {R.shape}, expected (r, {W.shape[0]})")
        object.__setattr__(self, "factor", R)


@dataclass
class ProjectionResult:
    """Recovered state ``x`` with ``z = Psi(x)`` recomputed from it."""

    x: np.ndarray
    z: np.ndarray
    iterations: int = 0
    step_norms: list = field(default_factory=list)
    converged: bool = True
    objective: float = float("nan")
    condition: float = 1.0


def _as_weight(W) -> np.ndarray:
    return W.W if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)


def _as_factor(W) -> np.ndarray:
    return (W if isinstance(W, WeightMatrix) else WeightMatrix(W)).factor


def objective(dictionary: MonomialDictionary, W, z, x) -> float:
    """``|Psi(x) - z|_W^2``."""
    r = dictionary.lift(x) - np.asarray(z, dtype=float)
    return float(r @ _as_weight(W) @ r)


def coordinate_weight(dictionary: MonomialDictionary) -> WeightMatrix:
    """Diagonal 0/1 weight selecting the witness entries of the dictionary."""
    W = np.zeros((dictionary.size, dictionary.size))
    for k, _ in dictionary.witnesses():
        W[k, k] = 1.0
    return WeightMatrix(W, "coordinate")


def coordinate_project(dictionary: MonomialDictionary, z) -> ProjectionResult:
    """Read the state from the witness entries and lift it again."""
    x = dictionary.invert_on_manifold(z)
    zp = dictionary.lift(x)
    Wc = coordinate_weight(dictionary)
    return ProjectionResult(x, zp, 0, [], True, objective(dictionary, Wc, z, x))


def covariance_weight(S, ridge: float | None = None) -> WeightMatrix:
    """``W = Sigma^-1`` for the regularised covariance ``regularized(S, ridge)``."""
    lam, V = np.linalg.eigh(regularized(S, ridge))
    lam = np.maximum(lam, lam[-1] * np.finfo(float).eps)
    W = (V / lam) @ V.T
    R = V.T / np.sqrt(lam)[:, None]
    return WeightMatrix(0.5 * (W + W.T), "inverse_covariance", R)


def ml_weight(Q: CovarianceSurrogate, p, ridge: float | None = None) -> WeightMatrix:
    """Inverse of ``sigma_at(Q, p, ridge)``: the maximum-likelihood weight."""
    return covariance_weight(Q.evaluate(p), ridge)


def newton_project(
    dictionary: MonomialDictionary,
    W,
    z,
    x0,
    tol: float = 1e-8,
    k_max: int = 50,
    domain: Box | None = None,
    inflate: float = 0.1,
    max_halvings: int = 20,
) -> ProjectionResult:
    """Riemannian Newton iteration for ``min_x |Psi(x) - z|_W^2``.

    Each iteration solves ``(J^T W J) v = -J^T W (Psi(x) - z)`` with
    ``J = DPsi(x)`` (pseudoinverse, cutoff ``1e-12 * s_max``) and moves
    ``x <- x + v``.  A step that increases the objective is halved up to
    ``max_halvings`` times.  With ``domain`` given, iterates are clamped to the
    box inflated by ``inflate``.  ``step_norms`` records the full Newton step
    ``|v_k|``; the loop stops once ``|v_k| <= tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = _as_factor(W)
    z = np.asarray(z, dtype=float)
    x = np.array(x0, dtype=float)
    box = domain.inflate(1.0 + inflate) if domain is not None else None
    if box is not None:
        x = box.clip(x)

    Rnorm = float(np.linalg.norm(R, 2)) if R.size else 0.0
    eps = np.finfo(float).eps

    def f(xx):
        q = dictionary.lift(xx)
        r = q - z
        Rr = R @ r
        # rounding in Psi(x) - z, amplified by R, bounds how finely f can be compared
        delta = 8.0 * eps * np.sqrt(len(z)) * Rnorm * max(float(np.abs(q).max(initial=0.0)), float(np.abs(z).max(initial=0.0)))
        val = float(Rr @ Rr)
        return val, r, 2.0 * np.sqrt(val) * delta + delta * delta

    fx, r, noise = f(x)
    norms: list[float] = []
    converged = False
    worst_cond = 1.0
    for _ in range(k_max):
        A = R @ dictionary.jacobian(x)
        b = R @ r
        v, cond = _gn_step(A, b, np.ones(x.shape[0], dtype=bool))
        if box is not None:
            # coordinates the step would push out of the box are pinned to the bound
            # and the remaining ones re-solved, so the step stays a Newton step
            fixed = np.zeros(x.shape[0], dtype=bool)
            for _ in range(x.shape[0]):
                out = ~fixed & ((x + v < box.lo) | (x + v > box.hi))
                if not out.any():
                    break
                fixed |= out
                vfix = np.where(fixed, box.clip(x + v) - x, 0.0)
                vfree, cond = _gn_step(A, b + A @ vfix, ~fixed)
                v = vfix + vfree
        worst_cond = max(worst_cond, cond)
        vnorm = float(np.linalg.norm(v))
        norms.append(vnorm)

        step = v
        x_new = x + step if box is None else box.clip(x + step)
        f_new, r_new, noise_new = f(x_new)
        halvings = 0
        while f_new > fx + noise and halvings < max_halvings:
            step = 0.5 * step
            x_new = x + step if box is None else box.clip(x + step)
            f_new, r_new, noise_new = f(x_new)
            halvings += 1
        if f_new <= fx + noise:
            x, fx, r, noise = x_new, f_new, r_new, noise_new
        if vnorm <= tol:
            converged = True
            break

    return ProjectionResult(
        x=x,
        z=dictionary.lift(x),
        iterations=len(norms),
        step_norms=norms,
        converged=converged,
        objective=fx,
        condition=worst_cond,
    )


def _gn_step(A: np.ndarray, b: np.ndarray, free: np.ndarray):
    """Minimum-norm solution of ``min |A v + b|`` over the ``free`` coordinates.

    Equals ``-(A^T A)^+ A^T b`` with the pseudoinverse cutoff applied to the
    singular values of ``A^T A`` (hence its square root on those of ``A``),
    without forming the normal equations.  Returns the step and the
    condition number of ``A^T A`` on the retained subspace.
    """
    v = np.zeros(A.shape[1])
    if not free.any():
        return v, 1.0
    U, s, Vt = np.linalg.svd(A[:, free], full_matrices=False)
    keep = s > np.sqrt(PINV_CUTOFF) * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    cond = float((s[0] / s[keep][-1]) ** 2) if keep.all() else float("inf")
    v[free] = -(Vt[keep].T @ ((U[:, keep].T @ b) / s[keep]))
    return v, cond


class GridOracle:
    """Exhaustive minimiser of ``|Psi(x) - z|_W^2`` over a regular grid.

    Lifted grid points and their quadratic term ``Psi^T W Psi`` are computed
    once, so repeated queries with the same weight cost one matrix-vector
    product each.  Ties go to the lowest lexicographic grid index.
    """

    def __init__(self, dictionary: MonomialDictionary, W, domain: Box, points_per_axis: int):
        if points_per_axis < 2:
            raise ValueError("points_per_axis must be at least 2")
        total = points_per_axis**dictionary.dim
        if total > MAX_GRID_EVALS:
            raise GridTooLargeError(f"grid has {total:.3e} points, limit is {MAX_GRID_EVALS:.0e}")
        self.dictionary = dictionary
        self.W = _as_weight(W)
        self.domain = domain
        self.axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(domain.lo, domain.hi)]
        self.spacing = (domain.hi - domain.lo) / (points_per_axis - 1)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([g.ravel() for g in mesh], axis=-1)
        self.features = dictionary.lift(self.points)
        self.quad = np.einsum("na,ab,nb->n", self.features, self.W, self.features, optimize=True)

    @property
    def cell_diameter(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def values(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        Wz = self.W @ z
        return self.quad - 2.0 * (self.features @ Wz) + float(z @ Wz)

    def project(self, z) -> ProjectionResult:
        z = np.asarray(z, dtype=float)
        vals = self.values(z)
        # the expanded form cancels badly near the minimum; rescore close candidates exactly
        slack = 1e-9 * (np.abs(self.quad).max() + abs(float(z @ self.W @ z))) + 1e-300
        cand = np.flatnonzero(vals <= vals.min() + slack)
        R = self.features[cand] - z
        exact = np.einsum("na,ab,nb->n", R, self.W, R, optimize=True)
        i = int(cand[np.argmin(exact)])
        x = self.points[i].copy()
        return ProjectionResult(x, self.dictionary.lift(x), 0, [], True, objective(self.dictionary, self.W, z, x))


def brute_force_project(
    dictionary: MonomialDictionary, W, z, domain: Box, points_per_axis: int
) -> ProjectionResult:
    """Grid-search reprojection over ``domain`` (verification oracle)."""
    return GridOracle(dictionary, W, domain, points_per_axis).project(z)
