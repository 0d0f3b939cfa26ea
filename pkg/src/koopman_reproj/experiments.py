"""Run configuration and the pipelines behind the command-line tools.

A :class:`RunConfig` carries every setting of an experiment (system,
dictionary, sampling, predictors, sweeps).  ``RunConfig.to_json`` writes all
defaults out explicitly, so a run is reproducible from its echoed config
alone, and ``config_hash`` fingerprints that canonical form.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .covariance import CovarianceSurrogate, fit_Q, residuals
from .dictionary import MonomialDictionary
from .dynamics import (
    BUILTIN_SYSTEMS,
    IntegrationError,
    ParametricSystem,
    builtin_system,
    combined_field,
    flow_series,
    integrate,
    sample_states,
)
from .edmd import KoopmanModel, SnapshotSet, dumps_canonical, fit_parametric, generate_snapshots
from .prediction import (
    PredictionTrace,
    PredictorConfig,
    compare_to_truth,
    one_step_map,
    predict,
    reprojection_intervals,
)
from .reprojection import covariance_weight, newton_project

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "DictionaryConfig",
    "DataConfig",
    "BifurcationConfig",
    "NewtonBenchConfig",
    "MultistepConfig",
    "RunConfig",
    "FitResult",
    "RunRecord",
    "fit_pipeline",
    "run_predictions",
    "bifurcation_table",
    "diagonal_crossings",
    "newton_bench",
    "multistep_runs",
    "simulate",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DictionaryConfig:
    degree: int = 5
    exclude: tuple = ()  # exponent tuples removed from the full monomial basis

    def build(self, dim: int) -> MonomialDictionary:
        return MonomialDictionary(dim, self.degree, frozenset(tuple(int(a) for a in e) for e in self.exclude))


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 5000
    seed: int = 0
    sampling: str = "uniform"
    param_grid: tuple | None = None
    traj_len: int = 10


@dataclass(frozen=True)
class BifurcationConfig:
    params: tuple = ()
    grid_points: int = 401


@dataclass(frozen=True)
class NewtonBenchConfig:
    param: tuple = ()
    x0: tuple = ()
    n_steps: int = 100
    every: int = 20
    cold_start: tuple | None = None  # defaults to the centre of the state box


@dataclass(frozen=True)
class MultistepConfig:
    param: tuple = ()
    x0: tuple = ()
    n_steps: int = 100
    factors: tuple = (10.0, 100.0, 1000.0)
    measure: str = "trace"
    index: int = 0


_SECTIONS = {
    "dictionary": DictionaryConfig,
    "data": DataConfig,
    "bifurcation": BifurcationConfig,
    "newton_bench": NewtonBenchConfig,
    "multistep": MultistepConfig,
}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _listify(v):
    if isinstance(v, (tuple, list)):
        return [_listify(x) for x in v]
    return v


@dataclass(frozen=True)
class RunConfig:
    """Complete, serialisable description of an experiment."""

    system: str
    t: float
    dictionary: DictionaryConfig = DictionaryConfig()
    data: DataConfig = DataConfig()
    ridge: float = 0.0
    on_singular: str = "ridge"
    params: tuple = ()
    initial_states: tuple = ()
    n_steps: int = 100
    predictors: tuple = (
        PredictorConfig(mode="standard"),
        PredictorConfig(mode="coordinate"),
        PredictorConfig(mode="max_likelihood"),
    )
    bifurcation: BifurcationConfig = BifurcationConfig()
    newton_bench: NewtonBenchConfig = NewtonBenchConfig()
    multistep: MultistepConfig = MultistepConfig()
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    # --- construction -----------------------------------------------------

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        version = obj.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}", "schema_version")
        kw = {}
        for key, val in obj.items():
            if key in _SECTIONS:
                kw[key] = _section(_SECTIONS[key], val, key)
            elif key == "predictors":
                if not isinstance(val, list):
                    raise ConfigError("must be a list of predictor objects", key)
                kw[key] = tuple(_section(PredictorConfig, v, f"predictors[{i}]") for i, v in enumerate(val))
            else:
                kw[key] = _tuplify(val)
        for req in ("system", "t"):
            if req not in kw:
                raise ConfigError("required field missing", req)
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_json(obj)

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "predictors":
                out[f.name] = [p.to_json() for p in v]
            elif f.name in _SECTIONS:
                out[f.name] = _listify(asdict(v))
            else:
                out[f.name] = _listify(v)
        return out

    def dumps(self) -> str:
        return dumps_canonical(self.to_json()) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(dumps_canonical(self.to_json()).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=int(seed)))

    # --- checks -----------------------------------------------------------

    def system_obj(self) -> ParametricSystem:
        return builtin_system(self.system)

    def validate(self) -> None:
        if self.system not in BUILTIN_SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {sorted(BUILTIN_SYSTEMS)}", "system")
        sys = self.system_obj()
        if not (isinstance(self.t, (int, float)) and self.t > 0):
            raise ConfigError("must be a positive number", "t")
        if int(self.dictionary.degree) < 1:
            raise ConfigError("must be at least 1", "dictionary.degree")
        for i, e in enumerate(self.dictionary.exclude):
            if len(e) != sys.d:
                raise ConfigError(f"exponent tuple needs {sys.d} entries", f"dictionary.exclude[{i}]")
        try:
            self.dictionary.build(sys.d)
        except ValueError as exc:
            raise ConfigError(str(exc), "dictionary") from None
        if self.data.n_samples < 1:
            raise ConfigError("must be positive", "data.n_samples")
        if self.data.sampling not in ("uniform", "grid", "trajectory"):
            raise ConfigError(f"unknown sampling scheme {self.data.sampling!r}", "data.sampling")
        if self.data.sampling == "grid" and not self.data.param_grid:
            raise ConfigError("grid sampling needs a parameter grid", "data.param_grid")
        if self.ridge < 0:
            raise ConfigError("must be non-negative", "ridge")
        if self.on_singular not in ("ridge", "raise", "minnorm"):
            raise ConfigError(f"unknown policy {self.on_singular!r}", "on_singular")
        if self.n_steps < 1:
            raise ConfigError("must be positive", "n_steps")
        for i, p in enumerate(self.params):
            _check_vec(p, sys.m, f"params[{i}]")
        for i, x in enumerate(self.initial_states):
            _check_vec(x, sys.d, f"initial_states[{i}]")
        for i, p in enumerate(self.bifurcation.params):
            _check_vec(p, sys.m, f"bifurcation.params[{i}]")
        if self.bifurcation.grid_points < 2:
            raise ConfigError("must be at least 2", "bifurcation.grid_points")
        for name, sec in (("newton_bench", self.newton_bench), ("multistep", self.multistep)):
            if sec.param:
                _check_vec(sec.param, sys.m, f"{name}.param")
            if sec.x0:
                _check_vec(sec.x0, sys.d, f"{name}.x0")
        if self.newton_bench.cold_start is not None:
            _check_vec(self.newton_bench.cold_start, sys.d, "newton_bench.cold_start")
        if self.newton_bench.every < 1:
            raise ConfigError("must be positive", "newton_bench.every")
        for f in self.multistep.factors:
            if not f > 1:
                raise ConfigError("trigger factors must exceed 1", "multistep.factors")
        if self.multistep.measure not in ("trace", "diag_entry"):
            raise ConfigError(f"unknown measure {self.multistep.measure!r}", "multistep.measure")
        labels = [p.label for p in self.predictors]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate predictors {labels}", "predictors")


def _section(cls, val, path):
    if not isinstance(val, dict):
        raise ConfigError("must be an object", path)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(val) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", path)
    try:
        return cls(**{k: _tuplify(v) for k, v in val.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def _check_vec(v, n, path):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("must be a list of numbers", path) from None
    if arr.shape != (n,):
        raise ConfigError(f"must have {n} entries, got shape {arr.shape}", path)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("entries must be finite", path)


# --- pipelines -------------------------------------------------------------


@dataclass
class FitResult:
    model: KoopmanModel
    Q: CovarianceSurrogate
    data: SnapshotSet
    diagnostics: dict = field(default_factory=dict)


def fit_pipeline(cfg: RunConfig) -> FitResult:
    """Sample snapshots, fit the parametric model and its covariance surrogate."""
    sys = cfg.system_obj()
    dct = cfg.dictionary.build(sys.d)
    d = cfg.data
    data = generate_snapshots(sys, d.n_samples, cfg.t, d.seed, d.sampling, d.param_grid, d.traj_len)
    model = fit_parametric(dct, data, cfg.ridge, cfg.on_singular)
    model = replace(model, state_domain=sys.state_domain, param_domain=sys.param_domain)
    res = residuals(model, data)
    Q = fit_Q(res)
    diag = {
        "system": sys.name,
        "M": model.M,
        "m": model.m,
        "n_samples": data.n,
        "residual_rms": float(np.sqrt(np.mean(res.r**2))),
        "gram_condition": model.info.get("condition"),
        "ridge_used": model.info.get("ridge"),
    }
    return FitResult(model, Q, data, diag)


@dataclass
class RunRecord:
    """One (predictor, parameter, initial state) run; ``error`` is set if it failed."""

    name: str
    predictor: PredictorConfig
    p: np.ndarray
    x0: np.ndarray
    trace: PredictionTrace | None = None
    errors: np.ndarray | None = None
    diagnostic: str = ""
    error: str | None = None

    def summary(self) -> dict:
        out = {
            "name": self.name,
            "predictor": self.predictor.label,
            "p": self.p.tolist(),
            "x0": self.x0.tolist(),
            "status": "failed" if self.error else "ok",
        }
        if self.error:
            out["error"] = self.error
            return out
        tr = self.trace
        out.update(
            {
                "terminal_state": None if np.isnan(tr.x[-1]).any() else tr.x[-1].tolist(),
                "terminal_error": None if self.errors is None or not len(self.errors) else float(self.errors[-1]),
                "max_error": None if self.errors is None or not len(self.errors) else float(np.max(self.errors)),
                "reprojections": int(tr.reprojected.sum()),
                "newton_failures": int((~tr.newton_converged).sum()),
                "truth_diagnostic": self.diagnostic,
            }
        )
        return out


def _run_name(pred: PredictorConfig, i_p: int, i_x: int) -> str:
    return f"{pred.label}_p{i_p}_x{i_x}"


def run_one(model, Q, sys, pred: PredictorConfig, p, x0, n_steps: int, name: str) -> RunRecord:
    rec = RunRecord(name, pred, np.atleast_1d(np.asarray(p, float)), np.atleast_1d(np.asarray(x0, float)))
    try:
        rec.trace = predict(model, Q, pred, rec.x0, rec.p, n_steps)
        es = compare_to_truth(rec.trace, sys, dictionary=model.dictionary)
        rec.errors, rec.diagnostic = es.errors, es.diagnostic
    except (ValueError, np.linalg.LinAlgError, IntegrationError, FloatingPointError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %s failed: %s", name, rec.error)
    return rec


def run_predictions(cfg: RunConfig, model: KoopmanModel, Q, threads: int = 1) -> list[RunRecord]:
    """All predictor x parameter x initial-state combinations, in config order."""
    sys = cfg.system_obj()
    jobs = [
        (pred, p, x0, _run_name(pred, i, j))
        for pred in cfg.predictors
        for i, p in enumerate(cfg.params)
        for j, x0 in enumerate(cfg.initial_states)
    ]

    def work(job):
        pred, p, x0, name = job
        return run_one(model, Q, sys, pred, p, x0, cfg.n_steps, name)

    return _map(work, jobs, threads)


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    # results are collected in submission order, so output does not depend on scheduling
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def bifurcation_table(cfg: RunConfig, model: KoopmanModel, Q) -> dict:
    """One-step maps on a state grid for every sweep parameter.

    Returns ``{"x": grid, "rows": [(p, {label: values}, truth)]}``.
    """
    sys = cfg.system_obj()
    if sys.d != 1:
        raise ConfigError(f"bifurcation sweeps need a scalar system, {sys.name} has d={sys.d}", "system")
    lo, hi = float(sys.state_domain.lo[0]), float(sys.state_domain.hi[0])
    xs = np.linspace(lo, hi, cfg.bifurcation.grid_points)
    rows = []
    for p in cfg.bifurcation.params:
        p = np.atleast_1d(np.asarray(p, float))
        maps = {}
        for pred in cfg.predictors:
            if pred.mode == "standard":
                z = model.dictionary.lift(xs[:, None]) @ model.matrix(p).T
                maps[pred.label] = model.dictionary.invert_on_manifold(z)[:, 0]
            else:
                maps[pred.label] = one_step_map(model, Q, pred, xs[:, None], p)[:, 0]
        truth = integrate(combined_field(sys, np.broadcast_to(p, (len(xs), sys.m))), xs[:, None], cfg.t)[:, 0]
        rows.append((p, maps, truth))
    return {"x": xs, "rows": rows}


def diagonal_crossings(xs, ys) -> np.ndarray:
    """Points where ``y(x) = x``, by linear interpolation between sign changes of ``y - x``.

    Exact zeros on the grid count once; a zero shared by a sign change is not
    reported twice.
    """
    xs, g = np.asarray(xs, float), np.asarray(ys, float) - np.asarray(xs, float)
    out = []
    for i in range(len(xs) - 1):
        a, b = g[i], g[i + 1]
        if a == 0.0:
            out.append(xs[i])
        elif a * b < 0:
            out.append(xs[i] - a * (xs[i + 1] - xs[i]) / (b - a))
    if g[-1] == 0.0:
        out.append(xs[-1])
    return np.array(out)


def newton_bench(cfg: RunConfig, model: KoopmanModel, Q) -> dict:
    """Step-norm histories of the warm-started and cold-started Newton solves.

    The maximum-likelihood predictor runs over the configured horizon; at
    every ``every``-th step the projection is re-solved from the fixed cold
    start as well, on the same target point.
    """
    sys = cfg.system_obj()
    nb = cfg.newton_bench
    ml = next((p for p in cfg.predictors if p.mode == "max_likelihood" and p.schedule == "every_step"), None)
    if ml is None:
        raise ConfigError("newton-bench needs an every-step max_likelihood predictor", "predictors")
    p = np.asarray(nb.param or cfg.params[0], float)
    x0 = np.asarray(nb.x0 or cfg.initial_states[0], float)
    cold = np.asarray(nb.cold_start, float) if nb.cold_start is not None else sys.state_domain.center
    trace = predict(model, Q, ml, x0, p, nb.n_steps)
    W = covariance_weight(Q.evaluate(p), ml.ridge)
    K = model.matrix(p)
    checkpoints = []
    for k in range(nb.every, nb.n_steps + 1, nb.every):
        target = K @ trace.z[k - 1]
        res = newton_project(model.dictionary, W, target, cold, ml.tol, ml.k_max, model.state_domain, ml.domain_inflate)
        checkpoints.append(
            {
                "step": k,
                "warm": list(trace.step_norms[k]),
                "warm_converged": bool(trace.newton_converged[k]),
                "cold": list(res.step_norms),
                "cold_converged": bool(res.converged),
            }
        )
    return {"p": p, "x0": x0, "cold_start": cold, "trace": trace, "checkpoints": checkpoints}


def multistep_runs(cfg: RunConfig, model: KoopmanModel, Q) -> list[dict]:
    """Adaptive max-likelihood runs, one per trigger factor."""
    sys = cfg.system_obj()
    ms = cfg.multistep
    p = np.asarray(ms.param or cfg.params[0], float)
    x0 = np.asarray(ms.x0 or cfg.initial_states[0], float)
    out = []
    for f in ms.factors:
        pc = PredictorConfig(
            mode="max_likelihood",
            schedule="adaptive",
            trigger_measure=ms.measure,
            trigger_index=ms.index,
            trigger_factor=float(f),
        )
        trace = predict(model, Q, pc, x0, p, ms.n_steps)
        es = compare_to_truth(trace, sys, dictionary=model.dictionary)
        out.append({"factor": float(f), "config": pc, "trace": trace, "intervals": reprojection_intervals(trace), "errors": es.errors})
    return out


def simulate(cfg: RunConfig) -> list[dict]:
    """Ground-truth trajectories for every configured (parameter, initial state)."""
    sys = cfg.system_obj()
    out = []
    for i, p in enumerate(cfg.params):
        for j, x0 in enumerate(cfg.initial_states):
            fld = combined_field(sys, np.asarray(p, float))
            diag = ""
            try:
                xs = flow_series(fld, np.asarray(x0, float), cfg.t, cfg.n_steps)
            except IntegrationError as exc:
                xs, diag = exc.series, str(exc)
            out.append({"name": f"truth_p{i}_x{j}", "p": np.asarray(p, float), "x0": np.asarray(x0, float), "x": xs, "diagnostic": diag})
    return out


def random_initial_states(cfg: RunConfig, n: int, stream: int = 7) -> np.ndarray:
    """``n`` initial states drawn uniformly from the state box (seeded by the config)."""
    return sample_states(cfg.system_obj().state_domain, n, cfg.data.seed, stream)
