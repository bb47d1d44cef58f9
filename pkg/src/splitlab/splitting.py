"""Convection-diffusion particle systems and splitting integrators.

A :class:`SplitSystem` carries two vector fields over an ``n x d`` array of
particle positions:

* ``diffusion(x, t)`` -- row ``i`` may depend on every row (interaction);
* ``convection(x, t)`` -- position-wise, row ``i`` depends only on row ``i``.

Each field may come with an exact sub-flow ``flow(x, t, dt)``. Schemes run in
one of two sub-step modes: ``"euler"`` replaces every sub-flow by a single
Euler update, ``"exact"`` composes the exact sub-flows.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .tensor import ContractError

Field = Callable[[np.ndarray, float], np.ndarray]
Flow = Callable[[np.ndarray, float, float], np.ndarray]

SCHEMES = ("euler", "lie-trotter", "strang-marchuk")
SUBSTEP_MODES = ("euler", "exact")

EPS = np.finfo(np.float64).eps


class NumericError(ArithmeticError):
    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class ConfigurationError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleState:
    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        x = np.array(self.positions, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ContractError(f"positions must be an n x d array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("positions must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class SplitSystem:
    diffusion: Field
    convection: Field
    diffusion_flow: Optional[Flow] = None
    convection_flow: Optional[Flow] = None
    name: str = "custom"
    # generator of the summed linear field x -> x @ M, when the system is linear
    linear_generator: Optional[np.ndarray] = None

    @property
    def has_exact_flows(self) -> bool:
        return self.diffusion_flow is not None and self.convection_flow is not None

    def total(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.diffusion(x, t) + self.convection(x, t)

    def reversed(self) -> "SplitSystem":
        """The time-reversed system: both fields negated."""
        def neg(f):
            return lambda x, t: -f(x, t)

        def back(flow):
            return None if flow is None else (lambda x, t, dt: flow(x, t, -dt))

        gen = None if self.linear_generator is None else -self.linear_generator
        return SplitSystem(neg(self.diffusion), neg(self.convection), back(self.diffusion_flow),
                           back(self.convection_flow), name=f"{self.name}-reversed", linear_generator=gen)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "lie-trotter"
    substep: str = "euler"
    gamma: float = 0.1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.substep not in SUBSTEP_MODES:
            raise ConfigurationError(f"unknown substep mode {self.substep!r}; expected one of {SUBSTEP_MODES}")
        if not self.gamma > 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")


def _checked(out: np.ndarray, what: str) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    bad = ~np.all(np.isfinite(out), axis=-1)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise NumericError(f"{what} produced a non-finite value in row {row}", row)
    return out


def euler_step(f: Field, state: ParticleState, gamma: float) -> ParticleState:
    """x + gamma * f(x, t); time advances by gamma."""
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    x = state.positions
    v = _checked(f(x, state.time), "vector field")
    return ParticleState(x + gamma * v, state.time + gamma)


def _euler_flow(f: Field) -> Flow:
    def flow(x, t, dt):
        return x + dt * _checked(f(x, t), "vector field")
    return flow


def _flows(system: SplitSystem, substep: str) -> tuple[Flow, Flow]:
    if substep == "exact":
        if not system.has_exact_flows:
            raise ConfigurationError(f"system {system.name!r} does not provide exact sub-flows")
        return system.diffusion_flow, system.convection_flow
    return _euler_flow(system.diffusion), _euler_flow(system.convection)


def lie_trotter_step(system: SplitSystem, state: ParticleState, config: SchemeConfig) -> ParticleState:
    """Diffusion for a full step, then convection for a full step."""
    flow_f, flow_g = _flows(system, config.substep)
    g, t = config.gamma, state.time
    x_tilde = flow_f(state.positions, t, g)
    out = flow_g(x_tilde, t, g)
    return ParticleState(_checked(out, "lie-trotter step"), t + g)


def strang_marchuk_step(system: SplitSystem, state: ParticleState, config: SchemeConfig) -> ParticleState:
    """Half convection at t, full diffusion at t, half convection at t + gamma/2."""
    flow_f, flow_g = _flows(system, config.substep)
    g, t = config.gamma, state.time
    half = g / 2
    x_tilde = flow_g(state.positions, t, half)
    x_hat = flow_f(x_tilde, t, g)
    out = flow_g(x_hat, t + half, half)
    return ParticleState(_checked(out, "strang-marchuk step"), t + g)


def step(system: SplitSystem, state: ParticleState, config: SchemeConfig) -> ParticleState:
    if config.scheme == "lie-trotter":
        return lie_trotter_step(system, state, config)
    if config.scheme == "strang-marchuk":
        return strang_marchuk_step(system, state, config)
    if config.substep == "exact":
        raise ConfigurationError("the unsplit euler scheme has no exact sub-step mode")
    return euler_step(system.total, state, config.gamma)


def integrate(system: SplitSystem, state: ParticleState, config: SchemeConfig, steps: int) -> list[ParticleState]:
    """Trajectory ``[x_0, ..., x_L]`` with time stamps ``t_0 + gamma * l``."""
    if steps < 1:
        raise ContractError("need at least one step")
    traj = [state]
    t0 = state.time
    for l in range(1, steps + 1):
        nxt = step(system, traj[-1], config)
        # stamp from t0 so times do not drift by repeated addition
        traj.append(ParticleState(nxt.positions, t0 + config.gamma * l))
    return traj


def rk4_flow(f: Field, x: np.ndarray, t: float, dt: float, substeps: int = 1000) -> np.ndarray:
    """Classical fourth-order Runge-Kutta over ``[t, t + dt]`` with fixed substeps."""
    h = dt / substeps
    y = np.array(x, dtype=np.float64)
    for k in range(substeps):
        s = t + k * h
        k1 = f(y, s)
        k2 = f(y + 0.5 * h * k1, s + 0.5 * h)
        k3 = f(y + 0.5 * h * k2, s + 0.5 * h)
        k4 = f(y + h * k3, s + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def reference_solution(system: SplitSystem, state: ParticleState, gamma: float) -> ParticleState:
    """High-accuracy flow of diffusion + convection over one step.

    Linear systems use the matrix exponential of the summed generator;
    everything else falls back to :func:`rk4_flow` with 1000 substeps.
    """
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    x = state.positions
    if system.linear_generator is not None:
        out = x @ scipy.linalg.expm(gamma * system.linear_generator)
    else:
        out = rk4_flow(system.total, x, state.time, gamma)
    return ParticleState(out, state.time + gamma)


def _jvp(f: Field, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    h = 1e-6 * (1.0 + np.max(np.abs(x)))
    return (f(x + h * v, t) - f(x - h * v, t)) / (2.0 * h)


def leading_error_commutator(system: SplitSystem, state: ParticleState) -> np.ndarray:
    """½ (J_F G - J_G F) at the state: the gamma² coefficient of the Lie-Trotter error."""
    x, t = state.positions, state.time
    fx = system.diffusion(x, t)
    gx = system.convection(x, t)
    return 0.5 * (_jvp(system.diffusion, x, t, gx) - _jvp(system.convection, x, t, fx))


@dataclass(frozen=True)
class ErrorSample:
    gamma: float
    output: ParticleState
    reference: ParticleState
    abs_error: float = field(init=False)

    def __post_init__(self):
        err = float(np.max(np.abs(self.output.positions - self.reference.positions)))
        object.__setattr__(self, "abs_error", err)

    @property
    def floor(self) -> float:
        return rounding_floor(self.reference.positions)


@dataclass
class OrderEstimate:
    samples: list[tuple[float, float]]
    slope: float
    intercept: float
    r2: float
    used: list[bool] = field(default_factory=list)

    @property
    def constant(self) -> float:
        return math.exp(self.intercept)


def rounding_floor(solution: np.ndarray) -> float:
    return 1e3 * EPS * float(np.max(np.abs(solution)))


def fit_order(gammas: Sequence[float], errors: Sequence[float], floors: Sequence[float] | float = 0.0) -> OrderEstimate:
    """Least-squares fit of log(error) against log(gamma).

    Samples at or below their rounding floor are kept in ``samples`` but do
    not enter the fit.
    """
    g = np.asarray(gammas, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    fl = np.broadcast_to(np.asarray(floors, dtype=np.float64), g.shape)
    if np.any(g <= 0) or np.any(e < 0):
        raise ContractError("samples need gamma > 0 and error >= 0")
    used = e > fl
    if used.sum() < 3:
        raise InsufficientDataError(
            f"only {int(used.sum())} of {g.size} samples lie above the rounding floor; need 3")
    lx, ly = np.log(g[used]), np.log(e[used])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return OrderEstimate(list(zip(g.tolist(), e.tolist())), float(slope), float(intercept), float(r2), used.tolist())


def _check_grid(gammas: Sequence[float]) -> np.ndarray:
    g = np.asarray(gammas, dtype=np.float64)
    if g.size < 4 or np.any(g <= 0):
        raise ContractError("gamma grid needs at least 4 positive points")
    if np.log10(g.max() / g.min()) < 2 - 1e-12:
        raise ContractError("gamma grid must span at least two decades")
    return g


def gamma_grid(gamma_min: float = 1e-3, gamma_max: float = 1e-1, points: int = 9) -> np.ndarray:
    return np.logspace(np.log10(gamma_min), np.log10(gamma_max), points)


def local_errors(system: SplitSystem, state: ParticleState, scheme: str, substep: str,
                 gammas: Sequence[float]) -> list[ErrorSample]:
    samples = []
    for g in _check_grid(gammas):
        out = step(system, state, SchemeConfig(scheme, substep, float(g)))
        samples.append(ErrorSample(float(g), out, reference_solution(system, state, float(g))))
    return samples


def order_study(system: SplitSystem, state: ParticleState, scheme: str, substep: str,
                gammas: Sequence[float]) -> OrderEstimate:
    """Fit the local-error exponent of one scheme against the reference flow."""
    samples = local_errors(system, state, scheme, substep, gammas)
    return fit_order([s.gamma for s in samples], [s.abs_error for s in samples], [s.floor for s in samples])


def leading_term_residual_study(system: SplitSystem, state: ParticleState,
                                gammas: Sequence[float]) -> OrderEstimate:
    """Order of the Lie-Trotter error once the gamma² commutator term is removed."""
    comm = leading_error_commutator(system, state)
    gs, errs, floors = [], [], []
    for g in _check_grid(gammas):
        g = float(g)
        out = lie_trotter_step(system, state, SchemeConfig("lie-trotter", "exact", g))
        ref = reference_solution(system, state, g)
        resid = (ref.positions - out.positions) - g * g * comm
        gs.append(g)
        errs.append(float(np.max(np.abs(resid))))
        floors.append(rounding_floor(ref.positions))
    return fit_order(gs, errs, floors)


CSV_HEADER = ("gamma", "abs_error", "scheme", "substep_mode", "system")


def order_study_csv(samples: Sequence[tuple[float, float]], scheme: str, substep: str, system: str) -> str:
    """CSV text for (gamma, error) pairs, floats at 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for g, e in samples:
        w.writerow([f"{g:.17g}", f"{e:.17g}", scheme, substep, system])
    return buf.getvalue()


def is_position_wise(f: Field, x: np.ndarray, t: float = 0.0) -> bool:
    """Exact check that stacking rows commutes with applying ``f``."""
    full = f(x, t)
    rows = np.vstack([f(x[i:i + 1], t) for i in range(x.shape[0])])
    return bool(np.array_equal(full, rows))
