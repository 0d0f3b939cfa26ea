"""Multistep prediction with optional reprojection onto the lifted-state manifold.

Modes:

* ``standard`` iterates ``z <- K(p) z`` and only reads states off for display;
* ``coordinate`` replaces ``z`` by ``Psi(witness readout of z)`` after a step;
* ``max_likelihood`` replaces ``z`` by the ``Sigma^-1``-weighted reprojection.

With ``schedule="adaptive"`` the reprojection is skipped while the propagated
covariance stays within ``trigger_factor`` times its one-step value.
"""

from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .covariance import CovarianceSurrogate, propagate_covariance
from .dictionary import UnsupportedDictionaryError
from .dynamics import IntegrationError, ParametricSystem, combined_field, flow_series
from .edmd import KoopmanModel, dumps_canonical
from .reprojection import coordinate_project, covariance_weight, newton_project

__all__ = [
    "PredictorConfig",
    "PredictionTrace",
    "ErrorSeries",
    "predict",
    "trigger_measure_value",
    "compare_to_truth",
    "one_step_map",
    "reprojection_intervals",
]

log = logging.getLogger(__name__)

MODES = ("standard", "coordinate", "max_likelihood")
SCHEDULES = ("every_step", "adaptive")
MEASURES = ("trace", "diag_entry")


@dataclass(frozen=True)
class PredictorConfig:
    mode: str = "max_likelihood"
    schedule: str = "every_step"
    trigger_measure: str = "trace"
    trigger_index: int = 0
    trigger_factor: float = 10.0
    ridge: float | None = None
    tol: float = 1e-8
    k_max: int = 50
    warm_start: str = "previous"
    domain_inflate: float = 0.1
    scaled_trigger: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.trigger_measure not in MEASURES:
            raise ValueError(f"trigger_measure must be one of {MEASURES}, got {self.trigger_measure!r}")
        if self.schedule == "adaptive" and self.mode == "standard":
            raise ValueError("the adaptive schedule needs a reprojecting mode")
        if not self.trigger_factor > 1:
            raise ValueError("trigger_factor must exceed 1")
        if self.warm_start not in ("previous", "readout"):
            raise ValueError(f"unknown warm start policy {self.warm_start!r}")

    @property
    def needs_covariance(self) -> bool:
        return self.mode == "max_likelihood" or self.schedule == "adaptive"

    @property
    def label(self) -> str:
        if self.schedule == "adaptive":
            return f"{self.mode}-adaptive-{self.trigger_factor:g}"
        return self.mode

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PredictionTrace:
    """Per-step record of a prediction run.

    ``x`` holds NaN rows where no state can be read off (standard mode with a
    dictionary lacking witnesses).  ``mu`` is the trigger measure of the
    propagated covariance (NaN without a surrogate).
    """

    p: np.ndarray
    x0: np.ndarray
    t: float
    n_steps: int
    z: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    reprojected: np.ndarray
    newton_iterations: np.ndarray
    newton_converged: np.ndarray
    step_norms: list = field(default_factory=list)
    sigmas: list | None = None
    config: dict = field(default_factory=dict)
    states_available: bool = True

    @property
    def times(self) -> np.ndarray:
        return self.t * np.arange(self.n_steps + 1)

    def csv_columns(self, include_z: bool = False) -> list[str]:
        cols = ["k", "time"] + [f"x{j + 1}" for j in range(self.x.shape[1])]
        if include_z:
            cols += [f"z{j + 1}" for j in range(self.z.shape[1])]
        return cols + ["mu", "reprojected", "newton_iters"]

    def to_csv(self, include_z: bool = False) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.csv_columns(include_z)) + "\n")
        for k in range(self.n_steps + 1):
            row = [str(k), _num(self.times[k])] + [_num(v) for v in self.x[k]]
            if include_z:
                row += [_num(v) for v in self.z[k]]
            row += [_num(self.mu[k]), str(int(self.reprojected[k])), str(int(self.newton_iterations[k]))]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "p": self.p.tolist(),
            "x0": self.x0.tolist(),
            "t": float(self.t),
            "n_steps": int(self.n_steps),
            "config": self.config,
            "states_available": self.states_available,
            "reprojections": int(self.reprojected.sum()),
            "newton_failures": int((~self.newton_converged).sum()),
            "csv_columns": self.csv_columns(),
        }

    def to_json(self) -> str:
        return dumps_canonical(self.metadata())


def _num(v) -> str:
    v = float(v)
    return "nan" if v != v else format(v, ".17g")


@dataclass
class ErrorSeries:
    """Euclidean errors ``|x(k) - x_true(k)|`` (or lifted errors, see ``space``)."""

    times: np.ndarray
    errors: np.ndarray
    truth: np.ndarray
    space: str = "state"
    truncated_at: int | None = None
    diagnostic: str = ""


def trigger_measure_value(S, measure: str = "trace", index: int = 0) -> float:
    """Scalar size of a covariance: its trace or one diagonal entry."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"covariance must be square, got {S.shape}")
    if measure == "trace":
        return float(np.trace(S))
    if measure == "diag_entry":
        if not 0 <= index < S.shape[0]:
            raise IndexError(f"diagonal index {index} out of range for a {S.shape[0]}x{S.shape[0]} matrix")
        return float(S[index, index])
    raise ValueError(f"unknown measure {measure!r}")


def _readout(model: KoopmanModel, z: np.ndarray):
    try:
        return model.dictionary.invert_on_manifold(z)
    except UnsupportedDictionaryError:
        return None


def predict(
    model: KoopmanModel,
    Q: CovarianceSurrogate | None,
    config: PredictorConfig,
    x0,
    p,
    n_steps: int,
    record_covariance: bool = False,
) -> PredictionTrace:
    """Run ``n_steps`` model steps from ``Psi(x0)`` under parameter ``p``."""
    dct = model.dictionary
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float)).reshape(model.m)
    if x0.shape != (dct.dim,):
        raise ValueError(f"initial state has shape {x0.shape}, expected ({dct.dim},)")
    if config.needs_covariance and Q is None:
        raise ValueError(f"predictor {config.label!r} needs a covariance surrogate")
    K = model.matrix(p)
    M = model.M
    scale = np.asarray(model.feature_scale, dtype=float)

    def measure(S):
        if config.scaled_trigger:
            S = S / np.outer(scale, scale)
        return trigger_measure_value(S, config.trigger_measure, config.trigger_index)

    Qpp = Q.evaluate(p) if Q is not None else None
    baseline = measure(Qpp) if Qpp is not None else np.nan
    W_every = covariance_weight(Qpp, config.ridge) if (config.mode == "max_likelihood" and config.schedule == "every_step") else None

    zs = np.empty((n_steps + 1, M))
    xs = np.full((n_steps + 1, dct.dim), np.nan)
    mus = np.full(n_steps + 1, np.nan)
    rep = np.zeros(n_steps + 1, dtype=bool)
    iters = np.zeros(n_steps + 1, dtype=int)
    conv = np.ones(n_steps + 1, dtype=bool)
    norms: list = [[]]
    sigmas = [] if record_covariance else None

    z = dct.lift(x0)
    zs[0], xs[0] = z, x0
    S = np.zeros((M, M))
    if Q is not None:
        mus[0] = measure(S)
    if sigmas is not None:
        sigmas.append(S.copy())
    x_anchor = x0.copy()
    has_witness = _readout(model, z) is not None

    for k in range(1, n_steps + 1):
        z = K @ z
        if Q is not None:
            S = propagate_covariance(model, Q, p, S)
        step_norms: list = []
        do_project = config.mode != "standard"
        W = W_every
        if config.schedule == "adaptive":
            # reproject now if running one more step would cross the threshold
            ahead = propagate_covariance(model, Q, p, S)
            do_project = measure(ahead) > config.trigger_factor * baseline
            if do_project and config.mode == "max_likelihood":
                W = covariance_weight(S, config.ridge)

        if do_project:
            if config.mode == "coordinate":
                res = coordinate_project(dct, z)
            else:
                if config.warm_start == "previous" or not has_witness:
                    start = x_anchor
                else:
                    start = dct.invert_on_manifold(z)
                res = newton_project(
                    dct, W, z, start, config.tol, config.k_max, model.state_domain, config.domain_inflate
                )
                iters[k] = res.iterations
                step_norms = list(res.step_norms)
                if not res.converged:
                    conv[k] = False
                    log.debug("Newton did not converge at step %d (last step %.3e)", k, res.step_norms[-1])
                    if has_witness:
                        res = coordinate_project(dct, z)
            z = res.z
            x_anchor = res.x
            xs[k] = res.x
            rep[k] = True
            S = np.zeros((M, M))
        elif has_witness:
            xs[k] = dct.invert_on_manifold(z)
        zs[k] = z
        if Q is not None:
            mus[k] = measure(S)
        if sigmas is not None:
            sigmas.append(S.copy())
        norms.append(step_norms)

    return PredictionTrace(
        p=p,
        x0=x0,
        t=model.t,
        n_steps=n_steps,
        z=zs,
        x=xs,
        mu=mus,
        reprojected=rep,
        newton_iterations=iters,
        newton_converged=conv,
        step_norms=norms,
        sigmas=sigmas,
        config=config.to_json(),
        states_available=has_witness or config.mode != "standard",
    )


def reprojection_intervals(trace: PredictionTrace) -> list[int]:
    """Step counts between consecutive reprojections (the first measured from k=0)."""
    ks = [0] + [int(k) for k in np.flatnonzero(trace.reprojected)]
    return [b - a for a, b in zip(ks, ks[1:])]


def compare_to_truth(
    trace: PredictionTrace, sys: ParametricSystem, rel_tol: float = 1e-8, abs_tol: float = 1e-10, dictionary=None
) -> ErrorSeries:
    """Per-step distance between predicted and integrated states.

    When the trace carries no states, errors are measured in lifted space
    against ``Psi(x_true)`` and require ``dictionary``.
    """
    fld = combined_field(sys, trace.p)
    truncated, diagnostic = None, ""
    try:
        truth = flow_series(fld, trace.x0, trace.t, trace.n_steps, rel_tol, abs_tol)
    except IntegrationError as exc:
        truth = exc.series
        truncated = truth.shape[0]
        diagnostic = f"ground truth failed after step {truncated - 1}: {exc}"
    n = truth.shape[0]
    if trace.states_available:
        err = np.linalg.norm(trace.x[:n] - truth, axis=1)
        space = "state"
    else:
        if dictionary is None:
            raise ValueError("lifted-space errors need the dictionary")
        err = np.linalg.norm(trace.z[:n] - dictionary.lift(truth), axis=1)
        space = "lifted"
    return ErrorSeries(trace.times[:n], err, truth, space, truncated, diagnostic)


def one_step_map(model: KoopmanModel, Q, config: PredictorConfig, xs, p) -> np.ndarray:
    """Recovered state after one predicted step from each row of ``xs``."""
    xs = np.asarray(xs, dtype=float).reshape(-1, model.dictionary.dim)
    every = PredictorConfig(**{**config.to_json(), "schedule": "every_step"}) if config.schedule != "every_step" else config
    out = np.empty_like(xs)
    for i, x in enumerate(xs):
        tr = predict(model, Q, every, x, p, 1)
        out[i] = tr.x[1]
    return out
