"""Residual covariance surrogate ``Sigma(p) = sum_ij pbar_i pbar_j Q_ij``.

The surrogate is fitted by regressing ``vec(r r^T)`` on ``pbar (x) pbar`` with
Monte-Carlo moment matrices taken over the same samples as the residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .edmd import KoopmanModel, SnapshotSet, apply

__all__ = [
    "CovarianceSurrogate",
    "ResidualSamples",
    "IdentifiabilityError",
    "residuals",
    "fit_Q",
    "sigma_at",
    "propagate_covariance",
    "analytic_moment_matrix",
    "default_ridge",
    "regularized",
]

PINV_CUTOFF = 1e-12


class IdentifiabilityError(np.linalg.LinAlgError):
    """Too few distinct parameter values to identify a quadratic in ``pbar``."""


@dataclass(frozen=True)
class ResidualSamples:
    """Lifted residuals ``r_j`` (shape ``(N, M)``) with augmented parameters ``pbar_j``."""

    r: np.ndarray
    pbar: np.ndarray

    def __post_init__(self):
        if self.r.shape[0] != self.pbar.shape[0]:
            raise ValueError("residuals and parameters differ in length")

    @property
    def n(self) -> int:
        return self.r.shape[0]


@dataclass(frozen=True)
class CovarianceSurrogate:
    """Blocks ``Q_ij`` of shape ``(m + 1, m + 1, M, M)`` with ``Q_ij = Q_ji^T``."""

    blocks: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        B = np.asarray(self.blocks, dtype=float)
        if B.ndim != 4 or B.shape[0] != B.shape[1] or B.shape[2] != B.shape[3]:
            raise ValueError(f"covariance blocks must have shape (m+1, m+1, M, M), got {B.shape}")
        object.__setattr__(self, "blocks", B)

    @property
    def m(self) -> int:
        return self.blocks.shape[0] - 1

    @property
    def M(self) -> int:
        return self.blocks.shape[2]

    def evaluate(self, p) -> np.ndarray:
        """``Q(pbar, pbar)`` without any PSD correction."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if p.shape != (self.m,):
            raise ValueError(f"parameter has shape {p.shape}, surrogate expects ({self.m},)")
        pbar = np.concatenate([[1.0], p])
        return np.einsum("i,j,ijab->ab", pbar, pbar, self.blocks)


def residuals(model: KoopmanModel, data: SnapshotSet) -> ResidualSamples:
    """``r_j = Psi(x_j+) - (K_0 + sum_i p_ij K_i) Psi(x_j)``."""
    if data.m != model.m:
        raise ValueError(f"data has m={data.m} parameters, model has m={model.m}")
    if data.states.shape[1] != model.dictionary.dim:
        raise ValueError("data state dimension does not match the model dictionary")
    dct = model.dictionary
    Z = dct.lift(data.states)
    pbar = data.augmented_params()
    # K(p_j) Psi(x_j) = sum_i pbar_ji K_i Psi(x_j), batched over j
    pred = np.einsum("ni,iab,nb->na", pbar, model.blocks, Z)
    return ResidualSamples(dct.lift(data.successors) - pred, pbar)


def _kron_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def fit_Q(samples: ResidualSamples, m: int | None = None, moment: np.ndarray | None = None) -> CovarianceSurrogate:
    """Fit the symmetric bilinear form ``Q`` from residual samples.

    ``Y = mean_j (r_j (x) r_j)(pbar_j (x) pbar_j)^T`` and
    ``X = mean_j (pbar_j (x) pbar_j)(pbar_j (x) pbar_j)^T``; then
    ``vec Q(pbar, pbar) = Y X^+ (pbar (x) pbar)``.  Pass ``moment`` to use a
    precomputed ``X`` (e.g. :func:`analytic_moment_matrix`) instead.

    Raises
    ------
    IdentifiabilityError
        If ``X`` has rank below ``(m+1)(m+2)/2``.
    """
    R, P = np.asarray(samples.r, float), np.asarray(samples.pbar, float)
    k = P.shape[1]
    if m is not None and k != m + 1:
        raise ValueError(f"samples carry {k - 1} parameters, expected m={m}")
    N, M = R.shape
    PP = _kron_rows(P, P)  # (N, k^2)
    Y = np.einsum("na,nb,nc->bac", R, R, PP, optimize=True).reshape(M * M, k * k) / N
    X = PP.T @ PP / N if moment is None else np.asarray(moment, float)
    s = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(s > PINV_CUTOFF * s[0])) if s[0] > 0 else 0
    need = k * (k + 1) // 2
    if rank < need:
        raise IdentifiabilityError(
            f"parameter moment matrix has rank {rank}, need {need} for m={k - 1}; sample more distinct parameters"
        )
    L = Y @ np.linalg.pinv(X, rcond=PINV_CUTOFF, hermitian=True)  # (M^2, k^2)
    blocks = np.empty((k, k, M, M))
    for i, j in product(range(k), repeat=2):
        col = 0.5 * (L[:, i * k + j] + L[:, j * k + i])
        blocks[i, j] = col.reshape(M, M, order="F")
    blocks = 0.5 * (blocks + blocks.transpose(1, 0, 3, 2))
    return CovarianceSurrogate(blocks, {"n_samples": int(N), "moment": "monte_carlo" if moment is None else "given"})


def analytic_moment_matrix(lo, hi) -> np.ndarray:
    """``E[(pbar (x) pbar)(pbar (x) pbar)^T]`` for ``p`` uniform on the box ``[lo, hi]``."""
    lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
    m = lo.shape[0]
    k = m + 1

    def raw_moment(axis, power):
        a, b = lo[axis], hi[axis]
        if a == b:
            return a**power
        return (b ** (power + 1) - a ** (power + 1)) / ((power + 1) * (b - a))

    X = np.empty((k * k, k * k))
    for r, c in product(range(k * k), repeat=2):
        idx = [r // k, r % k, c // k, c % k]
        val = 1.0
        for axis in range(m):
            val *= raw_moment(axis, sum(1 for i in idx if i == axis + 1))
        X[r, c] = val
    return X


def default_ridge(S: np.ndarray) -> float:
    return 1e-10 * float(np.trace(S)) / S.shape[0]


def regularized(S, ridge: float | None = None) -> np.ndarray:
    """Symmetrised ``S + ridge I`` with eigenvalues below ``ridge`` raised to ``ridge``.

    ``ridge=None`` uses ``1e-10 * trace(S) / M``.  When no eigenvalue needs
    clipping the sum is returned as is, without an eigen-reconstruction.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    if ridge is None:
        ridge = max(default_ridge(S), 0.0)
    out = S + ridge * np.eye(S.shape[0])
    lam, V = np.linalg.eigh(out)
    if lam[0] >= ridge:
        return out
    out = (V * np.maximum(lam, ridge)) @ V.T
    return 0.5 * (out + out.T)


def sigma_at(Q: CovarianceSurrogate, p, ridge: float | None = None) -> np.ndarray:
    """Residual covariance ``Q(pbar, pbar)`` made positive definite (see :func:`regularized`)."""
    return regularized(Q.evaluate(p), ridge)


def propagate_covariance(model: KoopmanModel, Q: CovarianceSurrogate, p, S) -> np.ndarray:
    """One step of ``Sigma_{k+1} = Q(pbar, pbar) + K(p) Sigma_k K(p)^T``."""
    S = np.asarray(S, dtype=float)
    if S.shape != (model.M, model.M):
        raise ValueError(f"covariance has shape {S.shape}, expected {(model.M, model.M)}")
    K = model.matrix(p)
    A = K @ S @ K.T
    return Q.evaluate(p) + 0.5 * (A + A.T)
