"""Autonomous and parameter-affine EDMD fits, model application and model files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import MonomialDictionary
from .dynamics import Box, ParametricSystem, combined_field, integrate, sample_states, sample_trajectory_states

__all__ = [
    "SnapshotSet",
    "KoopmanModel",
    "SingularGramError",
    "ModelFormatError",
    "FORMAT_VERSION",
    "generate_snapshots",
    "regression_features",
    "fit_autonomous",
    "fit_parametric",
    "apply",
    "save_model",
    "load_model",
    "dumps_canonical",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SINGULAR_CUTOFF = 1e-12


class SingularGramError(np.linalg.LinAlgError):
    """The regression Gram matrix is numerically singular."""

    def __init__(self, smallest: float, largest: float):
        super().__init__(
            f"regression matrix is rank deficient: smallest singular value {smallest:.3e} "
            f"(largest {largest:.3e}); pass ridge > 0 or more data"
        )
        self.smallest = smallest
        self.largest = largest


class ModelFormatError(ValueError):
    """A model file is malformed, from another format version, or corrupted."""


@dataclass(frozen=True)
class SnapshotSet:
    """Snapshot pairs ``x_j -> x_j+ = Fl^t(x_j)`` under parameters ``p_j``.

    ``params`` has shape ``(N, m)``; ``m = 0`` marks autonomous data.
    """

    states: np.ndarray
    params: np.ndarray
    successors: np.ndarray
    t: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.states, dtype=float))
        Y = np.atleast_2d(np.asarray(self.successors, dtype=float))
        P = np.asarray(self.params, dtype=float)
        if P.size == 0:
            P = np.zeros((X.shape[0], 0))
        P = P.reshape(X.shape[0], -1) if P.ndim < 2 else P
        if not (X.shape[0] == Y.shape[0] == P.shape[0]):
            raise ValueError(f"snapshot lists differ in length: {X.shape[0]}, {P.shape[0]}, {Y.shape[0]}")
        if X.shape != Y.shape:
            raise ValueError(f"states {X.shape} and successors {Y.shape} disagree")
        if not self.t > 0:
            raise ValueError(f"sampling time must be positive, got {self.t}")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "successors", Y)
        object.__setattr__(self, "params", P)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def m(self) -> int:
        return self.params.shape[1]

    def augmented_params(self) -> np.ndarray:
        """Rows ``pbar_j = (1, p_j)``."""
        return np.hstack([np.ones((self.n, 1)), self.params])


@dataclass(frozen=True)
class KoopmanModel:
    """Fitted blocks ``K_0..K_m`` acting on lifted states of ``dictionary``.

    ``blocks`` has shape ``(m + 1, M, M)``.  ``feature_scale`` holds the
    per-feature scaling used during fitting; it does not affect ``blocks``.
    """

    blocks: np.ndarray
    dictionary: MonomialDictionary
    t: float
    state_domain: Box | None = None
    param_domain: Box | None = None
    feature_scale: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        B = np.asarray(self.blocks, dtype=float)
        M = self.dictionary.size
        if B.ndim != 3 or B.shape[1:] != (M, M):
            raise ValueError(f"blocks must have shape (m+1, {M}, {M}), got {B.shape}")
        object.__setattr__(self, "blocks", B)
        if self.feature_scale is None:
            object.__setattr__(self, "feature_scale", np.ones(M))

    @property
    def m(self) -> int:
        return self.blocks.shape[0] - 1

    @property
    def M(self) -> int:
        return self.dictionary.size

    def matrix(self, p) -> np.ndarray:
        """``K(p) = K_0 + sum_i p_i K_i``."""
        p = _param_vector(p, self.m)
        return self.blocks[0] + np.tensordot(p, self.blocks[1:], axes=(0, 0))

    def stacked(self) -> np.ndarray:
        """The ``M x M(m+1)`` matrix ``[K_0 K_1 ... K_m]``."""
        return np.hstack(list(self.blocks))


def _param_vector(p, m: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.shape != (m,):
        raise ValueError(f"parameter has shape {p.shape}, model expects ({m},)")
    return p


def apply(model: KoopmanModel, p, z) -> np.ndarray:
    """One model step ``(K_0 + sum_i p_i K_i) z``; ``z`` may be batched ``(..., M)``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.M:
        raise ValueError(f"lifted state has length {z.shape[-1]}, model has M={model.M}")
    return z @ model.matrix(p).T


def generate_snapshots(
    sys: ParametricSystem,
    n: int,
    t: float,
    seed: int,
    sampling: str = "uniform",
    param_grid=None,
    traj_len: int = 10,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-10,
) -> SnapshotSet:
    """Sample states and parameters and integrate one step of length ``t``.

    ``sampling`` is ``"uniform"`` (i.i.d. on the boxes), ``"grid"`` (states
    i.i.d., parameters drawn uniformly from the finite set ``param_grid``) or
    ``"trajectory"`` (``n // traj_len`` trajectories of ``traj_len`` steps).
    """
    if sampling == "trajectory":
        X, P, Y = sample_trajectory_states(sys, max(1, n // traj_len), traj_len, t, seed)
        return SnapshotSet(X, P, Y, t)
    X = sample_states(sys.state_domain, n, seed, stream=0)
    if sampling == "uniform":
        P = sample_states(sys.param_domain, n, seed, stream=1)
    elif sampling == "grid":
        grid = np.asarray(param_grid, dtype=float).reshape(-1, sys.m)
        idx = np.floor(sample_states(Box([0.0], [1.0]), n, seed, stream=1)[:, 0] * len(grid)).astype(int)
        P = grid[np.minimum(idx, len(grid) - 1)]
    else:
        raise ValueError(f"unknown sampling scheme {sampling!r}")
    Y = integrate(combined_field(sys, P), X, t, rel_tol, abs_tol)
    return SnapshotSet(X, P, Y, t)


def regression_features(dictionary: MonomialDictionary, states, pbar) -> np.ndarray:
    """Rows ``pbar_j (x) Psi(x_j)``; shape ``(N, M(m+1))``."""
    Z = dictionary.lift(states)
    pbar = np.asarray(pbar, dtype=float)
    return (pbar[:, :, None] * Z[:, None, :]).reshape(Z.shape[0], -1)


def _max_abs_scale(A: np.ndarray) -> np.ndarray:
    s = np.max(np.abs(A), axis=0)
    return np.where(s > 0, s, 1.0)


def _solve(Phi: np.ndarray, Y: np.ndarray, ridge: float, on_singular: str) -> tuple[np.ndarray, dict]:
    """Least squares ``min ||Phi B - Y||^2 + ridge ||B||^2`` on equilibrated columns.

    Returns ``B`` of shape ``(cols, M)`` and diagnostics.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    cs = _max_abs_scale(Phi)
    ys = _max_abs_scale(Y)
    A = Phi / cs
    T = Y / ys
    diag = {"ridge": float(ridge), "column_scale_max": float(cs.max()), "column_scale_min": float(cs.min())}
    if ridge == 0:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        diag["condition"] = float(s[0] / s[-1]) if s[-1] > 0 else None
        if s[-1] > SINGULAR_CUTOFF * s[0]:
            Bs = Vt.T @ ((U.T @ T) / s[:, None])
            return (Bs / cs[:, None]) * ys, diag
        if on_singular == "raise":
            raise SingularGramError(float(s[-1]), float(s[0]))
        if on_singular == "minnorm":
            keep = s > SINGULAR_CUTOFF * s[0]
            Bs = Vt[keep].T @ ((U[:, keep].T @ T) / s[keep, None])
            diag["rank"] = int(keep.sum())
            return (Bs / cs[:, None]) * ys, diag
        if on_singular != "ridge":
            raise ValueError(f"unknown on_singular policy {on_singular!r}")
        G = A.T @ A
        ridge = 1e-10 * np.trace(G) / G.shape[0]
        log.warning("singular regression (s_min=%.3e); falling back to ridge=%.3e", s[-1], ridge)
        diag["ridge"] = float(ridge)
        diag["ridge_fallback"] = True
    G = A.T @ A + ridge * np.eye(A.shape[1])
    from scipy.linalg import cho_factor, cho_solve

    Bs = cho_solve(cho_factor(G), A.T @ T)
    return (Bs / cs[:, None]) * ys, diag


def fit_autonomous(
    dictionary: MonomialDictionary, data: SnapshotSet, ridge: float = 0.0, on_singular: str = "ridge"
) -> KoopmanModel:
    """EDMD: ``K = argmin sum_j ||Psi(x_j+) - K Psi(x_j)||^2 + ridge ||K||^2``.

    ``on_singular`` picks the behaviour for a rank-deficient problem with
    ``ridge == 0``: ``"ridge"`` (fall back to a tiny ridge, logged), ``"raise"``
    or ``"minnorm"`` (minimum-norm least-squares solution).
    """
    if data.m != 0:
        raise ValueError("fit_autonomous needs data without parameters; use fit_parametric")
    return fit_parametric(dictionary, data, ridge, on_singular)


def fit_parametric(
    dictionary: MonomialDictionary, data: SnapshotSet, ridge: float = 0.0, on_singular: str = "ridge"
) -> KoopmanModel:
    """Parameter-affine EDMD over features ``(1, p) (x) Psi(x)``.

    The regression matrix is split into blocks ``K_0..K_m`` so that
    ``Psi(Fl^t(x)) ~ (K_0 + sum_i p_i K_i) Psi(x)``.
    """
    if data.states.shape[1] != dictionary.dim:
        raise ValueError(f"data has state dimension {data.states.shape[1]}, dictionary expects {dictionary.dim}")
    M, m = dictionary.size, data.m
    Phi = regression_features(dictionary, data.states, data.augmented_params())
    Ysucc = dictionary.lift(data.successors)
    B, diag = _solve(Phi, Ysucc, ridge, on_singular)
    K = B.T  # (M, M(m+1))
    blocks = K.reshape(M, m + 1, M).transpose(1, 0, 2)
    diag["n_samples"] = data.n
    return KoopmanModel(
        blocks=np.ascontiguousarray(blocks),
        dictionary=dictionary,
        t=float(data.t),
        feature_scale=_max_abs_scale(dictionary.lift(data.states)),
        info=diag,
    )


# --- model files -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("non-finite value cannot be stored")
        s = format(v, ".17g")
        # keep float-ness visible so integers and floats stay distinct on reload
        return s if any(c in s for c in ".eEn") else s + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    if isinstance(v, np.ndarray):
        return _fmt(v.tolist())
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dumps_canonical(obj) -> str:
    """Deterministic JSON with keys in insertion order and floats at 17 digits."""
    return _fmt(obj)


def _array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarray(obj: dict, what: str) -> np.ndarray:
    try:
        data = np.array(obj["data"], dtype=float)
        return data.reshape(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"malformed array {what!r}: {exc}") from None


def _checksum(body: dict) -> str:
    return hashlib.sha256(dumps_canonical(body).encode()).hexdigest()


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: KoopmanModel, Q=None, path=None, extra: dict | None = None) -> str:
    """Write ``model`` (and optionally the covariance surrogate ``Q``) as JSON.

    Returns the document text.  ``extra`` is stored verbatim under ``"meta"``.
    """
    body = {
        "format_version": FORMAT_VERSION,
        "dictionary": model.dictionary.to_json(),
        "t": float(model.t),
        "m": model.m,
        "domains": {
            "state": model.state_domain.to_json() if model.state_domain is not None else None,
            "param": model.param_domain.to_json() if model.param_domain is not None else None,
        },
        "feature_scale": _array(model.feature_scale),
        "blocks": _array(model.blocks),
        "covariance": None if Q is None else {"blocks": _array(Q.blocks), "info": dict(Q.info)},
        "info": dict(model.info),
        "meta": dict(extra or {}),
    }
    doc = dict(body)
    doc["checksum"] = _checksum(body)
    text = dumps_canonical(doc) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def load_model(path):
    """Read a model file; returns ``(KoopmanModel, CovarianceSurrogate | None)``."""
    from .covariance import CovarianceSurrogate

    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must contain a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    checksum = doc.pop("checksum", None)
    if checksum is None:
        raise ModelFormatError("model file has no checksum")
    if _checksum(doc) != checksum:
        raise ModelFormatError("checksum mismatch: model file is corrupted or was edited")
    try:
        dictionary = MonomialDictionary.from_json(doc["dictionary"])
        m = int(doc["m"])
        blocks = _unarray(doc["blocks"], "blocks")
        M = dictionary.size
        if blocks.shape != (m + 1, M, M):
            raise ModelFormatError(f"blocks have shape {blocks.shape}, expected {(m + 1, M, M)} from the dictionary")
        domains = doc.get("domains") or {}
        sd = Box.from_json(domains["state"]) if domains.get("state") else None
        pd = Box.from_json(domains["param"]) if domains.get("param") else None
        scale = _unarray(doc["feature_scale"], "feature_scale")
        if scale.shape != (M,):
            raise ModelFormatError(f"feature_scale has shape {scale.shape}, expected ({M},)")
        model = KoopmanModel(blocks, dictionary, float(doc["t"]), sd, pd, scale, dict(doc.get("info") or {}))
        Q = None
        if doc.get("covariance") is not None:
            qb = _unarray(doc["covariance"]["blocks"], "covariance.blocks")
            if qb.shape != (m + 1, m + 1, M, M):
                raise ModelFormatError(
                    f"covariance blocks have shape {qb.shape}, expected {(m + 1, m + 1, M, M)}"
                )
            Q = CovarianceSurrogate(qb, dict(doc["covariance"].get("info") or {}))
    except KeyError as exc:
        raise ModelFormatError(f"model file is missing field {exc}") from None
    model.info.setdefault("meta", doc.get("meta", {}))
    return model, Q
