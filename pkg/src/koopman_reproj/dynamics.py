"""Parameter-affine vector fields, a Dormand-Prince integrator, benchmark
systems and domain samplers.

Every vector field in this module is vectorised over leading axes: an input
of shape ``(..., d)`` yields an output of shape ``(..., d)``.  The integrator
exploits this to advance whole batches of initial conditions at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Box",
    "VectorField",
    "ParametricSystem",
    "IntegrationError",
    "combined_field",
    "integrate",
    "integrate_fixed",
    "flow_series",
    "sample_states",
    "sample_trajectory_states",
    "builtin_system",
    "BUILTIN_SYSTEMS",
]


class IntegrationError(RuntimeError):
    """Step size underflow in the adaptive integrator."""

    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} (reached t={t_reached:.6g})")
        self.t_reached = t_reached


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]`` in R^k."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be 1-D and equal length, got {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise ValueError(f"box has lo > hi: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def inflate(self, factor: float) -> "Box":
        """Scale the box about its center by ``factor``."""
        half = 0.5 * (self.hi - self.lo) * factor
        return Box(self.center - half, self.center + half)

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - atol) & (x <= self.hi + atol), axis=-1)

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Box":
        return cls(np.array(obj["lo"], dtype=float), np.array(obj["hi"], dtype=float))


@dataclass(frozen=True)
class VectorField:
    """A map ``x -> dx/dt`` on R^dim, vectorised over leading axes."""

    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has length {x.shape[-1]}, field expects {self.dim}")
        return self.fn(x)


@dataclass(frozen=True)
class ParametricSystem:
    """``dx/dt = f(x) + sum_i p_i g_i(x)`` on a state box with a parameter box."""

    drift: VectorField
    inputs: tuple[VectorField, ...]
    state_domain: Box
    param_domain: Box
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        dims = {self.drift.dim, *(g.dim for g in self.inputs)}
        if len(dims) != 1:
            raise ValueError(f"vector fields disagree on dimension: {sorted(dims)}")
        if self.state_domain.dim != self.drift.dim:
            raise ValueError("state domain dimension does not match the vector fields")
        if self.param_domain.dim != len(self.inputs):
            raise ValueError(
                f"parameter domain has dimension {self.param_domain.dim} "
                f"but the system has {len(self.inputs)} input fields"
            )

    @property
    def d(self) -> int:
        return self.drift.dim

    @property
    def m(self) -> int:
        return len(self.inputs)


def combined_field(sys: ParametricSystem, p) -> VectorField:
    """Vector field ``x -> f(x) + sum_i p_i g_i(x)``.

    ``p`` may be a single parameter vector of length m, or an array of shape
    ``(n, m)`` pairing one parameter with each row of a batched state.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim == 0:
        p = p.reshape(1)
    if p.shape[-1] != sys.m:
        raise ValueError(f"parameter has length {p.shape[-1]}, system has m={sys.m}")

    def fn(x):
        out = np.array(sys.drift(x), dtype=float)
        for i, g in enumerate(sys.inputs):
            out = out + p[..., i : i + 1] * g(x)
        return out

    return VectorField(sys.d, fn)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _dp_step(fn, y, h):
    k = [fn(y)]
    for i in range(1, 7):
        yi = y + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(fn(yi))
    y5 = y + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k))
    return y5, err


def integrate(
    field: VectorField | Callable,
    x0,
    t: float,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-10,
    max_steps: int = 100_000,
) -> np.ndarray:
    """Approximate the flow ``Fl^t(x0)`` with adaptive Dormand-Prince 4(5).

    ``x0`` may be one state of shape ``(d,)`` or a batch ``(n, d)``; a batch
    shares one step-size sequence, controlled by the worst error in the batch.

    Raises
    ------
    IntegrationError
        When the step size underflows or ``max_steps`` is exhausted.
    """
    if t < 0:
        raise ValueError(f"integration time must be nonnegative, got {t}")
    if rel_tol <= 0 or abs_tol <= 0:
        raise ValueError("tolerances must be positive")
    y = np.array(x0, dtype=float)
    if t == 0:
        return y
    fn = field

    # initial step guess (Hairer, Norsett & Wanner II.4)
    f0 = fn(y)
    scale = abs_tol + rel_tol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, t)

    tc = 0.0
    for _ in range(max_steps):
        if tc >= t:
            return y
        h = min(h, t - tc)
        if h <= 1e-14 * max(1.0, t):
            raise IntegrationError("step size underflow", tc)
        y_new, err = _dp_step(fn, y, h)
        sc = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = (err / sc) ** 2
        en = np.sqrt(np.max(np.mean(ratio, axis=-1))) if ratio.ndim > 1 else np.sqrt(np.mean(ratio))
        if not np.isfinite(en):
            h *= 0.2
            continue
        if en <= 1.0:
            # land exactly on t to avoid a sliver step from roundoff
            tc = t if t - (tc + h) <= 1e-15 * t else tc + h
            y = y_new
            fac = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.2)
        else:
            fac = max(0.2, 0.9 * en ** -0.2)
        h *= fac
    if tc >= t:
        return y
    raise IntegrationError(f"exceeded {max_steps} steps", tc)


def integrate_fixed(field, x0, t: float, n_steps: int) -> np.ndarray:
    """Propagate with ``n_steps`` equal Dormand-Prince steps (5th-order solution)."""
    y = np.array(x0, dtype=float)
    if t == 0 or n_steps == 0:
        return y
    h = t / n_steps
    for _ in range(n_steps):
        y, _ = _dp_step(field, y, h)
    return y


def flow_series(field, x0, t: float, n_steps: int, rel_tol: float = 1e-8, abs_tol: float = 1e-10) -> np.ndarray:
    """States at times ``0, t, ..., n_steps*t``; shape ``(n_steps + 1, d)``.

    Stops early with :class:`IntegrationError` when a step fails; the partial
    series is attached to the exception as ``.series``.
    """
    x = np.array(x0, dtype=float)
    out = [x]
    for _ in range(n_steps):
        try:
            x = integrate(field, x, t, rel_tol, abs_tol)
        except IntegrationError as exc:
            exc.series = np.array(out)
            raise
        out.append(x)
    return np.array(out)


def _generator(seed: int, stream: int = 0) -> np.random.Generator:
    # Philox is counter-based: the key (seed, stream) plus the draw index fully
    # determine each value, independent of call history.
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


def sample_states(domain: Box, n: int, seed: int, stream: int = 0) -> np.ndarray:
    """``n`` i.i.d. uniform points on ``domain``; shape ``(n, k)``.

    Row ``i`` uses draws ``i*k .. i*k+k-1`` of the Philox stream keyed by
    ``(seed, stream)``, so it is a pure function of ``(seed, stream, i)``.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    u = _generator(seed, stream).random((n, domain.dim))
    return domain.lo + u * (domain.hi - domain.lo)


def sample_trajectory_states(
    sys: ParametricSystem, n_traj: int, traj_len: int, t: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Snapshot pairs collected along trajectories instead of i.i.d.

    Initial states and one parameter per trajectory are uniform on the
    system's boxes.  Returns ``(states, params, successors)`` with
    ``n_traj * traj_len`` rows.
    """
    x = sample_states(sys.state_domain, n_traj, seed, stream=0)
    p = sample_states(sys.param_domain, n_traj, seed, stream=1)
    fld = combined_field(sys, p)
    states, succ = [], []
    for _ in range(traj_len):
        y = integrate(fld, x, t)
        states.append(x)
        succ.append(y)
        x = y
    params = np.tile(p, (traj_len, 1))
    return np.concatenate(states), params, np.concatenate(succ)


def _pitchfork() -> ParametricSystem:
    drift = VectorField(1, lambda x: -(x**3))
    g = VectorField(1, lambda x: np.array(x, dtype=float))
    return ParametricSystem(drift, (g,), Box([-2.0], [2.0]), Box([-2.0], [2.0]), "pitchfork")


def _duffing(delta: float = 0.0, beta: float = 1.0) -> ParametricSystem:
    def f(x):
        return np.stack([x[..., 1], -delta * x[..., 1] - beta * x[..., 0] ** 3], axis=-1)

    def g(x):
        return np.stack([np.zeros_like(x[..., 0]), -x[..., 0]], axis=-1)

    return ParametricSystem(
        VectorField(2, f), (VectorField(2, g),), Box([-2.0, -2.0], [2.0, 2.0]), Box([-2.0], [2.0]), "duffing"
    )


def _lorenz(sigma: float = 10.0, beta: float = 8.0 / 3.0) -> ParametricSystem:
    # rho enters affinely: x1*(rho - x3) - x2 = (-x1*x3 - x2) + rho*x1
    def f(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([sigma * (x2 - x1), -x1 * x3 - x2, x1 * x2 - beta * x3], axis=-1)

    def g(x):
        z = np.zeros_like(x[..., 0])
        return np.stack([z, x[..., 0], z], axis=-1)

    return ParametricSystem(
        VectorField(3, f),
        (VectorField(3, g),),
        Box([-20.0, -20.0, 10.0], [20.0, 20.0, 50.0]),
        Box([10.0], [30.0]),
        "lorenz",
    )


BUILTIN_SYSTEMS: dict[str, Callable[[], ParametricSystem]] = {
    "pitchfork": _pitchfork,
    "duffing": _duffing,
    "lorenz": _lorenz,
}


def builtin_system(name: str) -> ParametricSystem:
    """One of the benchmark systems: ``pitchfork``, ``duffing`` or ``lorenz``."""
    try:
        return BUILTIN_SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(BUILTIN_SYSTEMS)}") from None
